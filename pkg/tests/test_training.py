import io
import math

import numpy as np
import pytest

from oracles import log_sigmoid
from ugatit.networks import NetConfig
from ugatit.params import ParamStore
from ugatit.synthetic import shape_domain
from ugatit import training as tr
from ugatit.training import (LossBundle, LossWeights, Models, NonFiniteLossError, TrainState,
                             adam_step, adversarial_loss, augment_sample, cam_loss_discriminator,
                             cam_loss_generator, cycle_loss, format_log_line, identity_loss,
                             learning_rate, log_header, objective_values, resize_nearest,
                             sample_pair, total_objective, train, train_step)
from ugatit.tensor import Tensor

TINY = NetConfig(16, 8, 1)


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_adversarial_examples(f64, rng):
    ones, zeros = T(np.ones((2, 1, 3, 3))), T(np.zeros((2, 1, 3, 3)))
    assert adversarial_loss(ones, zeros, "discriminator").item() == 0.0
    assert adversarial_loss(None, ones, "generator").item() == 0.0
    assert adversarial_loss(zeros, ones, "discriminator").item() == 2.0
    with pytest.raises(ValueError):
        adversarial_loss(None, ones, "critic")
    # Any departure from the generator optimum costs something.
    for _ in range(20):
        assert adversarial_loss(None, T(1 + rng.normal(size=(1, 1, 3, 3))), "generator").item() > 0


def test_cam_discriminator_examples(f64):
    ones, zeros = T(np.ones((3, 2))), T(np.zeros((3, 2)))
    assert cam_loss_discriminator(ones, zeros, "discriminator").item() == 0.0
    assert cam_loss_discriminator(None, ones, "generator").item() == 0.0
    assert cam_loss_discriminator(zeros, ones, "discriminator").item() == 2.0


@pytest.mark.parametrize("fn", [cycle_loss, identity_loss])
def test_l1_examples(f64, rng, fn):
    x = rng.normal(size=(1, 3, 4, 4))
    assert fn(T(x), T(x)).item() == 0.0
    assert fn(T(x), T(x + 0.5)).item() == pytest.approx(0.5, abs=1e-15)
    assert fn(T([0.0, 1.0]), T([1.0, 1.0])).item() == 0.5
    assert fn(T(x), T(x + 1e-3 * rng.normal(size=x.shape))).item() > 0
    with pytest.raises(ValueError):
        fn(T(x), T(x[:, :2]))


def test_cam_generator_examples(f64):
    assert cam_loss_generator(T([[1e3]]), T([[-1e3]])).item() == pytest.approx(0.0, abs=1e-12)
    zero = cam_loss_generator(T(np.zeros((2, 2))), T(np.zeros((2, 2)))).item()
    assert zero == pytest.approx(2 * math.log(2.0), abs=1e-12)     # ln 2 from each expectation
    one = cam_loss_generator(T([[1.0]]), T([[1.0]])).item()
    expect = -(log_sigmoid(1.0) + log_sigmoid(-1.0))
    assert one == pytest.approx(expect, abs=1e-12)
    assert one == pytest.approx(1.6265, abs=1e-4)


def test_total_objective_examples():
    w = LossWeights()
    assert total_objective(LossBundle(), w) == (0.0, 0.0)
    assert total_objective(LossBundle(adv_g=1.0), w)[0] == 1.0
    parts = LossBundle(adv_g=0.5, cycle=0.1, identity=0.2, cam_g=0.001)
    assert total_objective(parts, w)[0] == pytest.approx(4.5, abs=1e-12)
    with pytest.raises(ValueError):
        LossWeights(lambda_cam=-1)


def test_totals_are_linear_in_each_lambda(f64, rng):
    models = Models(TINY, 0)
    models.astype(np.float64)
    a, b = T(rng.uniform(-1, 1, (1, 3, 16, 16))), T(rng.uniform(-1, 1, (1, 3, 16, 16)))
    base = LossWeights(1.0, 10.0, 10.0, 1000.0)
    g0, d0, g_terms, d_terms = objective_values(models, a, b, base)
    for field, part in (("lambda_cycle", g_terms.cycle), ("lambda_identity", g_terms.identity)):
        doubled = LossWeights(**{**base.__dict__, field: 2 * getattr(base, field)})
        g1, d1, _, _ = objective_values(models, a, b, doubled)
        assert g1.item() - g0.item() == pytest.approx(getattr(base, field) * part.item(), rel=1e-9)
        assert d1.item() == d0.item()
    doubled = LossWeights(2.0, 10.0, 10.0, 1000.0)
    g1, d1, _, _ = objective_values(models, a, b, doubled)
    assert d1.item() - d0.item() == pytest.approx(d_terms.adv_d.item(), rel=1e-9)
    assert g1.item() - g0.item() == pytest.approx(g_terms.adv_g.item(), rel=1e-9)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def _store(value, decay=False, clamp=None):
    s = ParamStore()
    s.add("p", np.array([value], dtype=np.float64), decay=decay, clamp=clamp)
    return s


def test_first_adam_step():
    s = _store(0.0, decay=True)
    s["p"].grad = np.array([1.0])
    adam_step(s, TrainState(total_iters=10))
    assert s["p"].data[0] == pytest.approx(-1e-4, rel=1e-7)


def test_zero_gradient_leaves_exempt_parameter_unchanged():
    s = _store(0.7)
    s["p"].grad = np.array([0.0])
    for it in range(5):
        adam_step(s, TrainState(total_iters=10, iteration=it))
    assert s["p"].data[0] == 0.7
    decayed = _store(0.7, decay=True)
    decayed["p"].grad = np.array([0.0])
    adam_step(decayed, TrainState(total_iters=10))
    assert decayed["p"].data[0] == pytest.approx(0.7 * (1 - 1e-4 * 1e-4), rel=1e-12)


def test_gate_clamped_after_step():
    s = _store(0.99995, clamp=(0.0, 1.0))
    s["p"].grad = np.array([-1.0])
    adam_step(s, TrainState(total_iters=10, lr=2.5e-4))   # unclamped: 1.0002
    assert s["p"].data[0] == 1.0


def test_missing_gradient_is_an_error():
    with pytest.raises(ValueError, match="missing gradient"):
        adam_step(_store(0.0), TrainState())


def test_learning_rate_schedule():
    st = TrainState(total_iters=100)
    assert st.decay_start == 50
    assert [learning_rate(st, i) for i in (1, 50)] == [1e-4, 1e-4]
    assert learning_rate(st, 75) == pytest.approx(0.5e-4)
    assert learning_rate(st, 100) == 0.0
    assert learning_rate(TrainState(total_iters=100, decay_start=100), 100) == 1e-4
    with pytest.raises(ValueError):
        TrainState(lr=-1)


# ---------------------------------------------------------------------------
# augmentation and sampling
# ---------------------------------------------------------------------------

def test_augment_without_flip_is_resize_then_crop(rng):
    half = rng.normal(size=(3, 32, 16))
    img = np.concatenate([half, half[..., ::-1]], axis=2)        # left-right symmetric
    out = augment_sample(img, rng, flip=False, offset=(2, 2))
    np.testing.assert_array_equal(out, resize_nearest(img, 36)[:, 2:34, 2:34])
    assert resize_nearest(img, 36).shape == (3, 36, 36)


def test_double_flip_is_identity(rng):
    img = rng.normal(size=(3, 32, 32))
    plain = augment_sample(img, rng, flip=False, offset=(1, 3))
    twice = augment_sample(np.ascontiguousarray(img[..., ::-1]), rng, flip=True, offset=(1, 3))
    np.testing.assert_array_equal(twice, plain)


def test_augment_is_seed_deterministic(rng):
    img = rng.normal(size=(3, 32, 32))
    a = augment_sample(img, np.random.default_rng(9))
    b = augment_sample(img, np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()
    ra, rb = sample_pair(img[None], img[None], 3, 17), sample_pair(img[None], img[None], 3, 17)
    assert ra[0].data.tobytes() == rb[0].data.tobytes()


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------

def _data(n=2, size=16, seed=0):
    return shape_domain("square", n, size, seed), shape_domain("disk", n, size, seed)


def test_two_runs_are_bit_identical():
    a, b = _data()
    runs = []
    for _ in range(2):
        m, st = Models(TINY, 4), TrainState(total_iters=3, seed=4)
        runs.append([x.as_dict() for x in train(m, a, b, st, LossWeights(), 3)])
    assert runs[0] == runs[1]


def test_zero_lambdas_leave_parameters_unchanged():
    a, b = _data()
    m = Models(TINY, 0)
    before = {n: net.params.snapshot() for n, net in m.nets().items()}
    u0 = {n: {k: s.u.copy() for k, s in net.params.spectral.items()} for n, net in m.nets().items()}
    st = TrainState(total_iters=3, weight_decay=0.0)
    train(m, a, b, st, LossWeights(0, 0, 0, 0), 3)
    for n, net in m.nets().items():
        for k, v in net.params.snapshot().items():
            assert v.tobytes() == before[n][k].tobytes(), (n, k)
    moved = [not np.array_equal(s.u, u0[n][k]) for n, net in m.nets().items()
             for k, s in net.params.spectral.items()]
    assert any(moved)


def test_updates_touch_only_their_own_side(monkeypatch):
    a, b = _data()
    m = Models(TINY, 0)
    gen0 = {id(g): g.params.snapshot() for g in m.generators}
    seen = {}
    real_step = tr.adam_step

    def spy(params, state, prefix="", lr=None):
        if prefix.startswith("dis"):
            for g in m.generators:
                for k, v in g.params.snapshot().items():
                    assert v.tobytes() == gen0[id(g)][k].tobytes()
        real_step(params, state, prefix, lr)
        if prefix.startswith("dis"):
            seen[prefix] = params.snapshot()

    monkeypatch.setattr(tr, "adam_step", spy)
    train_step(m, *sample_pair(a, b, 0, 1), TrainState(total_iters=2), LossWeights())
    for name in ("disGA", "disGB", "disLA", "disLB"):
        for k, v in getattr(m, name).params.snapshot().items():
            assert v.tobytes() == seen[name + "."][k].tobytes()


def test_rho_stays_in_unit_interval():
    a, b = _data()
    m = Models(TINY, 0)
    st = TrainState(total_iters=30, lr=5e-2)      # large steps to push gates at the bounds
    train(m, a, b, st, LossWeights(), 30)
    for g in m.generators:
        for name, t in g.params.items():
            if "rho" in name:
                assert t.data.min() >= 0.0 and t.data.max() <= 1.0


def test_overfit_smoke():
    # One image per domain; the lr is held constant over the 200 steps.
    cfg = NetConfig(16, 16, 1)
    a, b = shape_domain("square", 1, 16, 0), shape_domain("disk", 1, 16, 0)
    m, st = Models(cfg, 0), TrainState(total_iters=100_000)
    cycles = [x.cycle for x in train(m, a, b, st, LossWeights(), 200, augment=False)]
    assert cycles[-1] < 0.2 * cycles[0]


def test_non_finite_loss_names_the_term():
    a, b = _data()
    m = Models(TINY, 0)
    m.disGA.params["cls.bias"].data[...] = 1e30
    with np.errstate(over="ignore"), pytest.raises(NonFiniteLossError, match="adv_d/disGA"):
        train_step(m, *sample_pair(a, b, 0, 1), TrainState(), LossWeights())


def test_log_format():
    a, b = _data()
    m, st = Models(TINY, 0), TrainState(total_iters=2)
    buf = io.StringIO()
    train(m, a, b, st, LossWeights(), 2, log=buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == 2
    fields = lines[0].split("\t")
    assert fields[0] == "1" and len(fields) == 10
    assert all(len(f.split(".")[1]) == 6 for f in fields[1:])
    assert log_header().split("\t") == ["iter", "adv_g", "adv_d", "cycle", "identity", "cam_g",
                                        "cam_d", "total_g", "total_d", "lr"]
    assert "cam_g" not in log_header(False)
    assert len(format_log_line(3, LossBundle(), 1e-4, use_cam=False).split("\t")) == 8
