"""Instance / layer / group normalization, the IN-LN blend, and spectral norm."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, mul, reshape

EPS = 1e-5


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def _scope_axes(scope: str) -> tuple:
    if scope == "channel":
        return (2, 3)
    if scope == "layer":
        return (1, 2, 3)
    raise ValueError(f"unknown scope {scope!r}")


def _shifted_moments(data: np.ndarray, axes: tuple):
    # Shifting by one in-scope sample first makes constant data give exactly
    # zero variance and reduces cancellation for data far from zero.
    ref = data[tuple(slice(0, 1) if i in axes else slice(None) for i in range(data.ndim))]
    d = data - ref
    dm = d.mean(axis=axes, keepdims=True)
    var = ((d - dm) ** 2).mean(axis=axes, keepdims=True)
    return ref + dm, np.sqrt(var)


def moments(x, scope: str = "channel", groups: int | None = None):
    """Population mean and standard deviation of ``[B, C, H, W]`` data.

    ``scope`` is ``"channel"`` (per batch item and channel), ``"layer"`` (per
    batch item) or ``"group"`` (per batch item and group of ``C // groups``
    channels). Statistics keep singleton axes so they broadcast against ``x``.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if scope == "group":
        b, c, h, w = data.shape
        if not groups or c % groups:
            raise ValueError(f"group count {groups} does not divide {c} channels")
        grouped = data.reshape(b, groups, c // groups, h, w)
        mu, sd = _shifted_moments(grouped, (2, 3, 4))
        return mu.reshape(b, groups, 1, 1), sd.reshape(b, groups, 1, 1)
    return _shifted_moments(data, _scope_axes(scope))


def standardize(x: Tensor, axes: tuple, eps: float = EPS) -> Tensor:
    """``(x - mean) / sqrt(var + eps)`` over ``axes`` with a fused backward."""
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    centered = xd - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=axes, keepdims=True) + eps)
    xhat = centered * inv

    def _bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return Tensor.from_op(xhat, (x,), _bw, "standardize")


def _group_standardize(x: Tensor, groups: int, eps: float) -> Tensor:
    b, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"group count {groups} does not divide {c} channels")
    grouped = reshape(x, (b, groups, c // groups, h, w))
    return reshape(standardize(grouped, (2, 3, 4), eps), (b, c, h, w))


def _affine(xhat: Tensor, gamma, beta) -> Tensor:
    c = xhat.shape[1]
    if gamma is not None:
        gamma = _per_channel(gamma, c)
        xhat = mul(xhat, gamma)
    if beta is not None:
        xhat = add(xhat, _per_channel(beta, c))
    return xhat


def _per_channel(p, c: int) -> Tensor:
    """Reshape a ``[C]`` or ``[B, C]`` tensor to broadcast over ``[B, C, H, W]``."""
    if not isinstance(p, Tensor):
        return p
    if p.ndim == 1:
        if p.shape[0] != c:
            raise ValueError(f"expected {c} channel values, got {p.shape[0]}")
        return reshape(p, (1, c, 1, 1))
    if p.ndim == 2:
        if p.shape[1] != c:
            raise ValueError(f"expected {c} channel values, got {p.shape[1]}")
        return reshape(p, (p.shape[0], c, 1, 1))
    raise ValueError(f"per-channel parameter must be 1-D or 2-D, got {p.shape}")


# ---------------------------------------------------------------------------
# normalization layers
# ---------------------------------------------------------------------------

def instance_norm(x: Tensor, gamma=None, beta=None, eps: float = EPS) -> Tensor:
    return _affine(standardize(x, (2, 3), eps), gamma, beta)


def layer_norm(x: Tensor, gamma=None, beta=None, eps: float = EPS) -> Tensor:
    return _affine(standardize(x, (1, 2, 3), eps), gamma, beta)


def group_norm(x: Tensor, gamma=None, beta=None, groups: int = 1, eps: float = EPS) -> Tensor:
    return _affine(_group_standardize(x, groups, eps), gamma, beta)


def _check_rho(rho: Tensor) -> None:
    r = rho.data
    if r.min() < 0.0 or r.max() > 1.0:
        raise ValueError(f"rho outside [0, 1] (range {r.min()}..{r.max()}); missed clamp?")


def ada_lin(a: Tensor, gamma, beta, rho: Tensor, eps: float = EPS) -> Tensor:
    """Blend instance- and layer-normalized activations, then apply gamma/beta.

    ``rho`` holds one gate per channel; ``gamma``/``beta`` are ``[B, C]``
    (externally generated) or ``[C]`` (locally learned).
    """
    _check_rho(rho)
    c = a.shape[1]
    x_in = standardize(a, (2, 3), eps)
    x_ln = standardize(a, (1, 2, 3), eps)
    gate = _per_channel(rho, c)
    mixed = x_ln + gate * (x_in - x_ln)
    return _affine(mixed, gamma, beta)


def lin_norm(x: Tensor, local_gamma: Tensor, local_beta: Tensor, rho: Tensor,
             eps: float = EPS) -> Tensor:
    """AdaLIN with locally learned per-channel gamma and beta."""
    return ada_lin(x, local_gamma, local_beta, rho, eps)


def clip_rho(values):
    """Clamp gate values into [0, 1]; works in place on Tensors."""
    if isinstance(values, Tensor):
        np.clip(values.data, 0.0, 1.0, out=values.data)
        return values
    return np.clip(np.asarray(values, dtype=float), 0.0, 1.0)


def rho_update(rho, tau: float, delta):
    """One gated step: ``clip(rho - tau * delta)``."""
    return clip_rho(np.asarray(rho, dtype=float) - tau * np.asarray(delta, dtype=float))


# ---------------------------------------------------------------------------
# spectral normalization
# ---------------------------------------------------------------------------

def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ZeroDivisionError("power iteration hit a zero vector (zero weight matrix?)")
    return v / n


@dataclass
class SpectralState:
    """Persistent power-iteration vectors for one weight.

    ``u`` lives in the output (row) space and ``v`` in the input (column) space
    of the weight viewed as ``[rows, cols]``.
    """

    u: np.ndarray
    v: np.ndarray

    @classmethod
    def init(cls, rows: int, cols: int, rng: np.random.Generator, dtype=np.float32,
             weight: np.ndarray | None = None):
        """Seeded unit Gaussian vectors.

        With ``weight`` given, one power-iteration round aligns the pair with
        it, so the very first estimate ``u^T W v`` is positive and close to
        the largest singular value instead of a random projection.
        """
        u = _unit(rng.standard_normal(rows)).astype(dtype)
        v = _unit(rng.standard_normal(cols)).astype(dtype)
        state = cls(u, v)
        if weight is not None:
            power_iterate(np.asarray(weight, dtype=dtype).reshape(rows, cols), state, 1)
        return state

    def astype(self, dtype) -> "SpectralState":
        return SpectralState(self.u.astype(dtype), self.v.astype(dtype))


def power_iterate(w2d: np.ndarray, state: SpectralState, iters: int = 1) -> None:
    """Advance ``state`` by ``iters`` rounds on the matrix ``w2d`` (in place)."""
    u = state.u
    for _ in range(iters):
        v = _unit(w2d.T @ u)
        u = _unit(w2d @ v)
    state.u[...] = u
    state.v[...] = v


def spectral_normalize(weight: Tensor, state: SpectralState, power_iters: int = 1,
                       update: bool = True) -> Tensor:
    """Divide ``weight`` by its estimated largest singular value ``u^T W v``.

    When ``update`` is true, ``state`` first advances by ``power_iters`` rounds.
    ``u`` and ``v`` are treated as constants by the backward pass.
    """
    if power_iters < 1:
        raise ValueError("power_iters must be >= 1")
    shape = weight.shape
    w2d = weight.data.reshape(shape[0], -1)
    if update:
        power_iterate(w2d, state, power_iters)
    u, v = state.u.astype(w2d.dtype), state.v.astype(w2d.dtype)
    sigma = float(u @ w2d @ v)
    if sigma == 0.0:
        raise ZeroDivisionError("spectral norm estimate is zero")
    outer = np.outer(u, v).reshape(shape)
    wd = weight.data

    def _bw(g):
        return (g / sigma - (np.sum(g * wd) / (sigma * sigma)) * outer,)

    return Tensor.from_op(wd / sigma, (weight,), _bw, "spectral_normalize")
