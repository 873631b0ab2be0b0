"""Losses, optimizer, augmentation and the per-iteration update."""
from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .networks import DiscriminatorNet, GeneratorNet, NetConfig
from .params import ParamStore
from .tensor import NonFiniteError, Tensor, abs_, backward, concat, log_sigmoid, mean, no_grad, square

LOG_COLUMNS = ("adv_g", "adv_d", "cycle", "identity", "cam_g", "cam_d", "total_g", "total_d")
CAM_COLUMNS = ("cam_g", "cam_d")


class NonFiniteLossError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _ls(x: Tensor, target: float) -> Tensor:
    return mean(square(x - target)) if target else mean(square(x))


def adversarial_loss(scores_real: Tensor | None, scores_fake: Tensor, side: str) -> Tensor:
    """Least-squares GAN loss on raw patch scores.

    Discriminator: ``mean((real - 1)^2) + mean(fake^2)``.
    Generator: ``mean((fake - 1)^2)``; ``scores_real`` is ignored.
    """
    if side == "generator":
        return _ls(scores_fake, 1.0)
    if side == "discriminator":
        if scores_real is None:
            raise ValueError("discriminator side needs real scores")
        return _ls(scores_real, 1.0) + _ls(scores_fake, 0.0)
    raise ValueError(f"side must be generator or discriminator, got {side!r}")


def l1_loss(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    return mean(abs_(x - y))


def cycle_loss(x: Tensor, x_reconstructed: Tensor) -> Tensor:
    return l1_loss(x, x_reconstructed)


def identity_loss(x: Tensor, x_identity_mapped: Tensor) -> Tensor:
    return l1_loss(x, x_identity_mapped)


def cam_loss_generator(logits_source: Tensor, logits_target: Tensor) -> Tensor:
    """Binary cross-entropy: source logits pushed to 1, target logits to 0.

    Each expectation is the mean over the batch and the (avg, max) logit pair.
    """
    return -(mean(log_sigmoid(logits_source)) + mean(log_sigmoid(-logits_target)))


def cam_loss_discriminator(logits_real: Tensor | None, logits_fake: Tensor, side: str) -> Tensor:
    """Least-squares loss on raw discriminator CAM logits (same targets as the patches)."""
    return adversarial_loss(logits_real, logits_fake, side)


@dataclass
class LossWeights:
    lambda_adv: float = 1.0
    lambda_cycle: float = 10.0
    lambda_identity: float = 10.0
    lambda_cam: float = 1000.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")


@dataclass
class LossBundle:
    adv_g: float = 0.0
    adv_d: float = 0.0
    cycle: float = 0.0
    identity: float = 0.0
    cam_g: float = 0.0
    cam_d: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def total_objective(parts, w: LossWeights):
    """Weighted generator and discriminator totals.

    ``parts`` needs ``adv_g, cycle, identity, cam_g, adv_d, cam_d`` attributes;
    they may be floats or Tensors.
    """
    total_g = (w.lambda_adv * parts.adv_g + w.lambda_cycle * parts.cycle
               + w.lambda_identity * parts.identity + w.lambda_cam * parts.cam_g)
    total_d = w.lambda_adv * parts.adv_d + w.lambda_cam * parts.cam_d
    return total_g, total_d


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    total_iters: int = 2000
    decay_start: int | None = None
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    iteration: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.decay_start is None:
            self.decay_start = self.total_iters // 2
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")


def learning_rate(state: TrainState, iteration: int | None = None) -> float:
    """Constant until ``decay_start``, then linear to zero at ``total_iters``.

    ``iteration`` is 1-based and defaults to the step about to run.
    """
    it = state.iteration + 1 if iteration is None else iteration
    if it <= state.decay_start:
        return state.lr
    span = state.total_iters - state.decay_start
    if span <= 0:
        return 0.0
    return state.lr * max(0.0, (state.total_iters - it) / span)


def adam_step(params: ParamStore, state: TrainState, prefix: str = "",
              lr: float | None = None) -> None:
    """Bias-corrected Adam with decoupled weight decay, then gate clamping."""
    lr = learning_rate(state) if lr is None else lr
    t = state.iteration + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name in params:
        spec = params.spec(name)
        p = spec.tensor
        if p.grad is None:
            raise ValueError(f"missing gradient for {prefix}{name}")
        key = prefix + name
        if key not in state.moments:
            state.moments[key] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[key]
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if spec.decay and state.weight_decay:
            step = step + state.weight_decay * p.data
        p.data -= (lr * step).astype(p.data.dtype)
        if spec.clamp is not None:
            np.clip(p.data, spec.clamp[0], spec.clamp[1], out=p.data)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[-2:]
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return img[..., rows, :][..., cols]


def augment_sample(img: np.ndarray, rng: np.random.Generator, flip: bool | None = None,
                   offset: tuple | None = None) -> np.ndarray:
    """Random horizontal flip, upscale by 286/256, random crop back to size.

    ``flip``/``offset`` override the random draws (the draws still happen,
    so the generator advances identically).
    """
    size = img.shape[-1]
    draw_flip = rng.random() < 0.5
    big = int(round(size * 286 / 256))
    top, left = (int(v) for v in rng.integers(0, big - size + 1, size=2))
    if flip is None:
        flip = draw_flip
    if offset is not None:
        top, left = offset
    out = img[..., ::-1] if flip else img
    out = resize_nearest(out, big)
    return np.ascontiguousarray(out[..., top:top + size, left:left + size])


# ---------------------------------------------------------------------------
# models and the training step
# ---------------------------------------------------------------------------

NET_NAMES = ("genA2B", "genB2A", "disGA", "disGB", "disLA", "disLB")


class Models:
    """Both generators and the four discriminators (global/local per domain)."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        self.cfg = cfg
        seeds = np.random.SeedSequence(seed).generate_state(len(NET_NAMES))
        s = dict(zip(NET_NAMES, (int(x) for x in seeds)))
        self.genA2B = GeneratorNet(cfg, s["genA2B"])
        self.genB2A = GeneratorNet(cfg, s["genB2A"])
        self.disGA = DiscriminatorNet(cfg, "global", s["disGA"])
        self.disGB = DiscriminatorNet(cfg, "global", s["disGB"])
        self.disLA = DiscriminatorNet(cfg, "local", s["disLA"])
        self.disLB = DiscriminatorNet(cfg, "local", s["disLB"])

    def nets(self) -> dict:
        return {name: getattr(self, name) for name in NET_NAMES}

    @property
    def generators(self):
        return (self.genA2B, self.genB2A)

    @property
    def discriminators(self):
        return (self.disGA, self.disGB, self.disLA, self.disLB)

    def astype(self, dtype) -> None:
        for net in self.nets().values():
            net.params.astype(dtype)


def _set_trainable(nets, flag: bool) -> None:
    for net in nets:
        for _, t in net.params.items():
            t.requires_grad = flag


def _finite(name: str, value: float) -> float:
    if not math.isfinite(value):
        raise NonFiniteLossError(f"loss term {name} is not finite ({value})")
    return value


@contextlib.contextmanager
def _term(name: str):
    """Re-raise op-level overflow as a loss error that names the term."""
    try:
        yield
    except NonFiniteError as exc:
        raise NonFiniteLossError(f"loss term {name} is not finite: {exc}") from exc


def _split(t: Tensor | None):
    if t is None:
        return None, None
    n = t.shape[0] // 2
    return t[:n], t[n:]


@dataclass
class GeneratorPass:
    """Generator outputs shared by the discriminator and generator updates."""

    fake_a2b: Tensor
    fake_b2a: Tensor
    fake_a2a: Tensor
    fake_b2b: Tensor
    fake_a2b2a: Tensor
    fake_b2a2b: Tensor
    cam_a2b_src: Tensor | None   # genA2B logits on domain A
    cam_a2b_tgt: Tensor | None   # genA2B logits on domain B
    cam_b2a_src: Tensor | None
    cam_b2a_tgt: Tensor | None


def generator_pass(models: Models, real_a: Tensor, real_b: Tensor) -> GeneratorPass:
    # A and B go through each generator in one batch; every op is per-sample.
    ab = models.genA2B(concat([real_a, real_b], axis=0))
    ba = models.genB2A(concat([real_b, real_a], axis=0))
    fake_a2b, fake_b2b = _split(ab.image)
    fake_b2a, fake_a2a = _split(ba.image)
    a2b_src, a2b_tgt = _split(ab.cam_logits)
    b2a_src, b2a_tgt = _split(ba.cam_logits)
    fake_a2b2a = models.genB2A(fake_a2b).image
    fake_b2a2b = models.genA2B(fake_b2a).image
    return GeneratorPass(fake_a2b, fake_b2a, fake_a2a, fake_b2b, fake_a2b2a, fake_b2a2b,
                         a2b_src, a2b_tgt, b2a_src, b2a_tgt)


@dataclass
class _Terms:
    adv_g: object = 0.0
    adv_d: object = 0.0
    cycle: object = 0.0
    identity: object = 0.0
    cam_g: object = 0.0
    cam_d: object = 0.0


# Every weighted part of either objective is one of these kinds.
_PART_WEIGHT = {"adv_g": "lambda_adv", "cycle": "lambda_cycle", "identity": "lambda_identity",
                "cam_g": "lambda_cam", "adv_d": "lambda_adv", "cam_d": "lambda_cam"}


def _sum_terms(parts: dict) -> _Terms:
    terms = _Terms()
    for key, value in parts.items():
        kind = key.split("/", 1)[0]
        setattr(terms, kind, getattr(terms, kind) + value)
    return terms


def discriminator_parts(models: Models, real_a: Tensor, real_b: Tensor,
                        fake_a: Tensor, fake_b: Tensor) -> dict:
    """Unweighted discriminator loss terms keyed ``kind/discriminator``."""
    parts = {}
    use_cam = models.cfg.use_cam
    for name, real, fake in (("disGA", real_a, fake_a), ("disLA", real_a, fake_a),
                             ("disGB", real_b, fake_b), ("disLB", real_b, fake_b)):
        with _term(f"adv_d/{name}"):
            out = getattr(models, name)(concat([real, fake], axis=0))
            s_real, s_fake = _split(out.scores)
            parts[f"adv_d/{name}"] = adversarial_loss(s_real, s_fake, "discriminator")
        if use_cam:
            with _term(f"cam_d/{name}"):
                l_real, l_fake = _split(out.cam_logits)
                parts[f"cam_d/{name}"] = cam_loss_discriminator(l_real, l_fake, "discriminator")
    return parts


def discriminator_terms(models: Models, real_a: Tensor, real_b: Tensor,
                        fake_a: Tensor, fake_b: Tensor) -> _Terms:
    """``adv_d`` and ``cam_d`` summed over both domains and both scales."""
    return _sum_terms(discriminator_parts(models, real_a, real_b, fake_a, fake_b))


def generator_parts(models: Models, real_a: Tensor, real_b: Tensor, gp: GeneratorPass) -> dict:
    """Unweighted generator loss terms keyed ``kind/origin``."""
    parts = {}
    use_cam = models.cfg.use_cam
    for name, fake in (("disGA", gp.fake_b2a), ("disLA", gp.fake_b2a),
                       ("disGB", gp.fake_a2b), ("disLB", gp.fake_a2b)):
        with _term(f"adv_g/{name}"):
            out = getattr(models, name)(fake)
            parts[f"adv_g/{name}"] = adversarial_loss(None, out.scores, "generator")
            if use_cam:
                # The generator also plays against the discriminator's CAM head.
                parts[f"adv_g/{name}.cam"] = cam_loss_discriminator(None, out.cam_logits, "generator")
    with _term("cycle"):
        parts["cycle/A"] = cycle_loss(real_a, gp.fake_a2b2a)
        parts["cycle/B"] = cycle_loss(real_b, gp.fake_b2a2b)
    with _term("identity"):
        parts["identity/A"] = identity_loss(real_a, gp.fake_a2a)
        parts["identity/B"] = identity_loss(real_b, gp.fake_b2b)
    if use_cam:
        with _term("cam_g"):
            parts["cam_g/genA2B"] = cam_loss_generator(gp.cam_a2b_src, gp.cam_a2b_tgt)
            parts["cam_g/genB2A"] = cam_loss_generator(gp.cam_b2a_src, gp.cam_b2a_tgt)
    return parts


def generator_terms(models: Models, real_a: Tensor, real_b: Tensor, gp: GeneratorPass) -> _Terms:
    return _sum_terms(generator_parts(models, real_a, real_b, gp))


def weighted_parts(parts: dict, weights: LossWeights) -> dict:
    """Scale each part by the lambda of its kind; the values sum to the total objective."""
    return {k: getattr(weights, _PART_WEIGHT[k.split("/", 1)[0]]) * v for k, v in parts.items()}


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def train_step(models: Models, real_a: Tensor, real_b: Tensor, state: TrainState,
               weights: LossWeights) -> LossBundle:
    """One discriminator update followed by one generator update."""
    lr = learning_rate(state)
    gens, dises = models.generators, models.discriminators
    gp = generator_pass(models, real_a, real_b)

    # (1) discriminators, generators frozen
    _set_trainable(dises, True)
    for d in dises:
        d.sn_update = True
    try:
        d_terms = discriminator_terms(models, real_a, real_b,
                                      gp.fake_b2a.detach(), gp.fake_a2b.detach())
    finally:
        for d in dises:
            d.sn_update = False
    with _term("total_d"):
        _, total_d = total_objective(_Terms(adv_d=d_terms.adv_d, cam_d=d_terms.cam_d), weights)
    _finite("adv_d", _value(d_terms.adv_d))
    _finite("cam_d", _value(d_terms.cam_d))
    _finite("total_d", _value(total_d))
    for d in dises:
        d.params.zero_grad()
    if isinstance(total_d, Tensor):
        backward(total_d)
    for name, d in zip(("disGA", "disGB", "disLA", "disLB"), dises):
        adam_step(d.params, state, name + ".", lr)

    # (2) generators, discriminators frozen
    _set_trainable(dises, False)
    try:
        g_terms = generator_terms(models, real_a, real_b, gp)
    finally:
        _set_trainable(dises, True)
    with _term("total_g"):
        total_g, _ = total_objective(g_terms, weights)
    for name in ("adv_g", "cycle", "identity", "cam_g"):
        _finite(name, _value(getattr(g_terms, name)))
    _finite("total_g", _value(total_g))
    for g in gens:
        g.params.zero_grad()
    backward(total_g)
    for name, g in zip(("genA2B", "genB2A"), gens):
        adam_step(g.params, state, name + ".", lr)

    state.iteration += 1
    return LossBundle(adv_g=_value(g_terms.adv_g), adv_d=_value(d_terms.adv_d),
                      cycle=_value(g_terms.cycle), identity=_value(g_terms.identity),
                      cam_g=_value(g_terms.cam_g), cam_d=_value(d_terms.cam_d),
                      total_g=_value(total_g), total_d=_value(total_d))


def objective_values(models: Models, real_a: Tensor, real_b: Tensor, weights: LossWeights,
                     update_spectral: bool = False):
    """Return ``(total_g, total_d)`` graphs at the current parameters, no updates.

    ``total_d`` sees detached fakes, as in the discriminator update.
    """
    gp = generator_pass(models, real_a, real_b)
    for d in models.discriminators:
        d.sn_update = update_spectral
    try:
        d_terms = discriminator_terms(models, real_a, real_b,
                                      gp.fake_b2a.detach(), gp.fake_a2b.detach())
    finally:
        for d in models.discriminators:
            d.sn_update = False
    g_terms = generator_terms(models, real_a, real_b, gp)
    total_g, _ = total_objective(g_terms, weights)
    _, total_d = total_objective(d_terms, weights)
    return total_g, total_d, g_terms, d_terms


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def format_log_line(iteration: int, bundle: LossBundle, lr: float, use_cam: bool = True) -> str:
    cols = [c for c in LOG_COLUMNS if use_cam or c not in CAM_COLUMNS]
    values = [f"{getattr(bundle, c):.6f}" for c in cols]
    return "\t".join([str(iteration)] + values + [f"{lr:.6f}"])


def log_header(use_cam: bool = True) -> str:
    cols = [c for c in LOG_COLUMNS if use_cam or c not in CAM_COLUMNS]
    return "\t".join(["iter"] + cols + ["lr"])


def sample_pair(data_a: np.ndarray, data_b: np.ndarray, seed: int, iteration: int,
                augment: bool = True):
    """Draw and augment one image per domain for a given (1-based) iteration.

    The generator is keyed on ``(seed, iteration)`` so resumed runs replay
    the same draws without storing RNG state.
    """
    rng = np.random.default_rng([seed, iteration])
    a = data_a[rng.integers(len(data_a))]
    b = data_b[rng.integers(len(data_b))]
    if augment:
        a = augment_sample(a, rng)
        b = augment_sample(b, rng)
    return Tensor(a[None]), Tensor(b[None])


def train(models: Models, data_a: np.ndarray, data_b: np.ndarray, state: TrainState,
          weights: LossWeights, iters: int, log=None, augment: bool = True,
          callback=None) -> list:
    """Run ``iters`` steps; writes one log line per step to ``log`` if given."""
    bundles = []
    for _ in range(iters):
        it = state.iteration + 1
        real_a, real_b = sample_pair(data_a, data_b, state.seed, it, augment)
        lr = learning_rate(state)
        bundle = train_step(models, real_a, real_b, state, weights)
        bundles.append(bundle)
        if log is not None:
            log.write(format_log_line(it, bundle, lr, models.cfg.use_cam) + "\n")
        if callback is not None:
            callback(it, bundle)
    return bundles


def translate(gen: GeneratorNet, images: np.ndarray, batch: int = 8):
    """Run a generator without recording gradients; returns (images, heatmaps)."""
    outs, maps = [], []
    with no_grad():
        for i in range(0, len(images), batch):
            o = gen(Tensor(images[i:i + batch]))
            outs.append(o.image.data)
            maps.append(o.heatmap)
    return np.concatenate(outs), np.concatenate(maps)
