"""Central-difference gradient checking against the reverse-mode engine."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import NonFiniteError, PrecisionError, Tensor, backward, frozen_pattern, no_grad


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    n_checked: int


@dataclass
class GradReport:
    tolerance: float
    checks: list = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return all(c.max_rel_error <= self.tolerance for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if c.max_rel_error > self.tolerance]

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            flag = "ok  " if c.max_rel_error <= self.tolerance else "FAIL"
            out.append(f"{flag} {c.name:<40s} n={c.n_checked:<4d} max_rel={c.max_rel_error:.3e} "
                       f"(analytic {c.analytic:+.6e}, numeric {c.numeric:+.6e})")
        return out


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _sample(size: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if size <= n:
        return np.arange(size)
    return np.sort(rng.choice(size, n, replace=False))


def _parts(out) -> list:
    if isinstance(out, Tensor):
        return [out]
    parts = [p for p in (out.values() if isinstance(out, Mapping) else out)
             if isinstance(p, Tensor)]
    if not parts:
        raise ValueError("objective returned no tensor parts")
    return parts


def finite_diff_check(f: Callable[[], object], params: Mapping[str, Tensor], step: float = 1e-5,
                      tolerance: float = 1e-6, samples: int = 32, seed: int = 0,
                      freeze_pattern: bool = False) -> GradReport:
    """Compare analytic gradients of ``f()`` with ``(f(p+h) - f(p-h)) / 2h``.

    ``f`` returns a scalar Tensor, or a mapping/sequence of scalar Tensors
    whose sum is the objective. With parts, the difference is formed per part
    before summing, which is the same quotient but keeps the roundoff of each
    part proportional to that part's magnitude rather than to the total.

    ``params`` maps names to leaf tensors that ``f`` reads; every tensor must
    be 64-bit. Tensors larger than ``samples`` are checked on a seeded random
    subset of elements.

    With ``freeze_pattern`` the probes replay the ReLU masks, |x| signs and
    max-pool choices of the unperturbed forward pass. Without it, a probe
    whose step crosses a kink measures a blend of two pieces, which for large
    networks happens somewhere almost surely.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    items = list(params.items())
    for name, t in items:
        if t.data.dtype != np.float64:
            raise PrecisionError(f"gradient checks need float64; {name} is {t.data.dtype}")
        t.grad = np.zeros_like(t.data)
    tape = None
    if freeze_pattern:
        with frozen_pattern() as tape:
            parts = _parts(f())
    else:
        parts = _parts(f())
    loss = parts[0]
    for p in parts[1:]:
        loss = loss + p
    backward(loss)
    analytic = {name: t.grad.copy() for name, t in items}

    def probe() -> np.ndarray:
        replay = frozen_pattern(tape) if tape is not None else contextlib.nullcontext()
        with no_grad(), replay:
            values = np.array([float(p.data) for p in _parts(f())])
        if not np.isfinite(values).all():
            raise NonFiniteError("non-finite loss while probing")
        return values

    rng = np.random.default_rng(seed)
    report = GradReport(tolerance)
    for name, t in items:
        flat = t.data.reshape(-1)
        worst = (0.0, (), 0.0, 0.0)
        idx = _sample(flat.size, samples, rng)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = probe()
            flat[i] = orig - step
            down = probe()
            flat[i] = orig
            num = float(np.sum(up - down)) / (2.0 * step)
            ana = float(analytic[name].reshape(-1)[i])
            err = relative_error(ana, num)
            if err >= worst[0]:
                worst = (err, np.unravel_index(i, t.shape), ana, num)
        report.checks.append(ParamCheck(name, worst[0], tuple(int(v) for v in worst[1]),
                                        worst[2], worst[3], len(idx)))
    return report


# ---------------------------------------------------------------------------
# end-to-end suite over both objectives
# ---------------------------------------------------------------------------

@dataclass
class SuiteResult:
    generator: GradReport
    discriminator: GradReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.generator.passed and self.discriminator.passed

    @property
    def max_rel_error(self) -> float:
        return max(self.generator.max_rel_error, self.discriminator.max_rel_error)

    def lines(self) -> list[str]:
        return self.generator.lines() + self.discriminator.lines()


def _check_point(models, rng: np.random.Generator) -> None:
    """Move the models to a generic point for differencing.

    Zero biases and unit gains are the least generic spot to differentiate
    at. Gates go to the interior of [0, 1] so both probes stay legal; gain-like
    vectors go near 1 and the rest near 0. Dense weights are redrawn at
    fan-in scale: with three stacked std-0.02 layers the gamma/beta head
    gradients would sit at the float64 roundoff floor of the probes. Conv
    weights keep their seeded initial values.
    """
    for net in models.nets().values():
        for name, t in net.params.items():
            if t.ndim == 2:
                t.data[...] = rng.normal(0.0, 1.0 / np.sqrt(t.shape[1]), t.shape)
            elif t.ndim > 2:
                continue
            elif net.params.spec(name).clamp:
                t.data[...] = rng.uniform(0.2, 0.8, t.shape)
            elif "gamma" in name:
                t.data[...] = 1.0 + rng.normal(0.0, 0.05, t.shape)
            else:
                t.data[...] = rng.normal(0.0, 0.05, t.shape)


def gradient_suite(img_size: int = 16, ch: int = 8, n_res: int = 1, tolerance: float = 1e-4,
                   step: float = 1e-5, samples: int = 32, seed: int = 0) -> SuiteResult:
    """Check d(total_g)/d(generator params) and d(total_d)/d(discriminator params).

    Runs in 64-bit on a freshly seeded model pair with one image per domain.
    The discriminator objective sees the generator's fakes as constants, as
    in the discriminator update.
    """
    import time

    from .networks import NetConfig
    from .tensor import precision
    from .training import (LossWeights, Models, discriminator_parts, generator_pass,
                           generator_parts, weighted_parts)

    start = time.perf_counter()
    cfg = NetConfig(img_size=img_size, ch=ch, n_res=n_res)
    rng = np.random.default_rng(seed)
    weights = LossWeights()
    with precision("float64"):
        models = Models(cfg, seed)
        models.astype(np.float64)
        _check_point(models, rng)
        real_a = Tensor(rng.uniform(-1.0, 1.0, (1, 3, img_size, img_size)))
        real_b = Tensor(rng.uniform(-1.0, 1.0, (1, 3, img_size, img_size)))

        def total_g():
            gp = generator_pass(models, real_a, real_b)
            return weighted_parts(generator_parts(models, real_a, real_b, gp), weights)

        with no_grad():
            gp = generator_pass(models, real_a, real_b)
            fake_a, fake_b = Tensor(gp.fake_b2a.data), Tensor(gp.fake_a2b.data)

        def total_d():
            parts = discriminator_parts(models, real_a, real_b, fake_a, fake_b)
            return weighted_parts(parts, weights)

        def named(nets):
            return {f"{n}.{k}": t for n, net in models.nets().items() if n in nets
                    for k, t in net.params.items()}

        rep_g = finite_diff_check(total_g, named(("genA2B", "genB2A")), step, tolerance,
                                  samples, seed, freeze_pattern=True)
        rep_d = finite_diff_check(total_d, named(("disGA", "disGB", "disLA", "disLB")), step,
                                  tolerance, samples, seed + 1, freeze_pattern=True)
    for net in models.nets().values():
        net.params.zero_grad()
    return SuiteResult(rep_g, rep_d, time.perf_counter() - start)
