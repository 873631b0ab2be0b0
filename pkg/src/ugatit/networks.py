"""Generator and two-scale PatchGAN discriminators."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .cam import CamModule, cam_attend, cam_heatmap, cam_logits
from .norm import (SpectralState, ada_lin, group_norm, instance_norm, layer_norm, lin_norm,
                   spectral_normalize)
from .params import ParamStore
from .tensor import (Tensor, conv2d, conv_output_size, fully_connected, global_pool,
                     leaky_relu, relu, reshape, tanh, upsample_nearest2x)

INIT_STD = 0.02
DECODER_NORMS = ("adalin", "in", "ln", "adain", "gn")
# Stride-2 stages of the full-size discriminators (256 px input).
GLOBAL_DOWNSAMPLES = 5
LOCAL_DOWNSAMPLES = 3


@dataclass(frozen=True)
class NetConfig:
    img_size: int = 32
    ch: int = 16
    n_res: int = 4
    n_downsample: int = 2
    light_mode: bool = False
    use_cam: bool = True
    decoder_norm: str = "adalin"
    gn_groups: int = 4

    def __post_init__(self):
        if self.img_size % 4 or self.img_size < 8:
            raise ValueError(f"img_size must be a multiple of 4 and >= 8, got {self.img_size}")
        if self.ch < 4:
            raise ValueError(f"ch must be >= 4, got {self.ch}")
        if self.n_res < 1:
            raise ValueError(f"n_res must be >= 1, got {self.n_res}")
        if self.n_downsample != 2:
            raise ValueError("the generator topology fixes n_downsample = 2")
        if self.decoder_norm not in DECODER_NORMS:
            raise ValueError(f"decoder_norm must be one of {DECODER_NORMS}")

    @property
    def bottleneck_channels(self) -> int:
        return self.ch * 2 ** self.n_downsample

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        names = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in names:
                raise KeyError(f"unknown NetConfig field {k}")
            kwargs[k] = v
        return cls(**kwargs)


class _Init:
    """Seeded parameter factory: normal(0, 0.02) weights, zero biases."""

    def __init__(self, store: ParamStore, seed: int):
        self.store = store
        self.rng = np.random.default_rng(seed)

    def weight(self, name, shape):
        return self.store.add(name, self.rng.normal(0.0, INIT_STD, size=shape), decay=True)

    def zeros(self, name, shape):
        return self.store.add(name, np.zeros(shape))

    def ones(self, name, shape):
        return self.store.add(name, np.ones(shape))

    def gate(self, name, n, value):
        return self.store.add(name, np.full(n, float(value)), clamp=(0.0, 1.0))


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

@dataclass
class GenOutput:
    image: Tensor
    cam_logits: Tensor | None
    attended: Tensor

    @property
    def heatmap(self) -> np.ndarray:
        return cam_heatmap(self.attended)


class GeneratorNet:
    """Encoder (IN) -> CAM attention -> decoder (AdaLIN residual, LIN up-sampling)."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParamStore()
        init = _Init(self.params, seed)
        ch, n = cfg.ch, cfg.bottleneck_channels
        init.weight("enc.conv0.weight", (ch, 3, 7, 7))
        c = ch
        for i in range(1, cfg.n_downsample + 1):
            init.weight(f"enc.down{i}.weight", (c * 2, c, 3, 3))
            c *= 2
        for j in range(cfg.n_res):
            init.weight(f"enc.res{j}.conv1.weight", (n, n, 3, 3))
            init.weight(f"enc.res{j}.conv2.weight", (n, n, 3, 3))
        if cfg.use_cam:
            init.weight("cam.w_avg", (n,))
            init.weight("cam.w_max", (n,))
            init.weight("cam.fuse.weight", (n, 2 * n, 1, 1))
            init.zeros("cam.fuse.bias", (n,))
        if self.adaptive:
            feat = n if cfg.light_mode else n * (cfg.img_size // 4) ** 2
            init.weight("mlp.fc1.weight", (n, feat))
            init.zeros("mlp.fc1.bias", (n,))
            init.weight("mlp.fc2.weight", (n, n))
            init.zeros("mlp.fc2.bias", (n,))
            init.weight("mlp.gamma.weight", (n, n))
            init.zeros("mlp.gamma.bias", (n,))
            init.weight("mlp.beta.weight", (n, n))
            init.zeros("mlp.beta.bias", (n,))
        for j in range(cfg.n_res):
            for k in (1, 2):
                init.weight(f"dec.res{j}.conv{k}.weight", (n, n, 3, 3))
                if cfg.decoder_norm == "adalin":
                    init.gate(f"dec.res{j}.rho{k}", n, 1.0)
                elif not self.adaptive:
                    init.ones(f"dec.res{j}.gamma{k}", (n,))
                    init.zeros(f"dec.res{j}.beta{k}", (n,))
        c = n
        for i in range(1, cfg.n_downsample + 1):
            init.weight(f"dec.up{i}.weight", (c // 2, c, 3, 3))
            c //= 2
            init.ones(f"dec.up{i}.gamma", (c,))
            init.zeros(f"dec.up{i}.beta", (c,))
            if cfg.decoder_norm == "adalin":
                init.gate(f"dec.up{i}.rho", c, 0.0)
        init.weight("dec.out.weight", (3, ch, 7, 7))
        init.zeros("dec.out.bias", (3,))

    @property
    def adaptive(self) -> bool:
        return self.cfg.decoder_norm in ("adalin", "adain")

    def cam(self) -> CamModule:
        p = self.params
        return CamModule(p["cam.w_avg"], p["cam.w_max"], p["cam.fuse.weight"], p["cam.fuse.bias"])

    def _norm(self, x, gamma, beta, rho):
        kind = self.cfg.decoder_norm
        if kind == "adalin":
            return ada_lin(x, gamma, beta, rho)
        if kind in ("in", "adain"):
            return instance_norm(x, gamma, beta)
        if kind == "ln":
            return layer_norm(x, gamma, beta)
        return group_norm(x, gamma, beta, math.gcd(x.shape[1], self.cfg.gn_groups))

    def _up_norm(self, x, i):
        p, kind = self.params, self.cfg.decoder_norm
        gamma, beta = p[f"dec.up{i}.gamma"], p[f"dec.up{i}.beta"]
        if kind == "adalin":
            return lin_norm(x, gamma, beta, p[f"dec.up{i}.rho"])
        if kind in ("in", "adain"):
            return instance_norm(x, gamma, beta)
        return self._norm(x, gamma, beta, None)

    def forward(self, x: Tensor) -> GenOutput:
        cfg, p = self.cfg, self.params
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (cfg.img_size, cfg.img_size):
            raise ValueError(f"generator expects [B, 3, {cfg.img_size}, {cfg.img_size}], got {x.shape}")
        h = relu(instance_norm(conv2d(x, p["enc.conv0.weight"], pad=3, pad_mode="reflect")))
        for i in range(1, cfg.n_downsample + 1):
            h = relu(instance_norm(conv2d(h, p[f"enc.down{i}.weight"], stride=2, pad=1)))
        for j in range(cfg.n_res):
            r = relu(instance_norm(conv2d(h, p[f"enc.res{j}.conv1.weight"], pad=1, pad_mode="reflect")))
            r = instance_norm(conv2d(r, p[f"enc.res{j}.conv2.weight"], pad=1, pad_mode="reflect"))
            h = h + r

        logits = None
        if cfg.use_cam:
            cam = self.cam()
            logits = cam_logits(h, cam)
            h = cam_attend(h, cam, "relu")
        attended = h

        gamma = beta = None
        if self.adaptive:
            b = h.shape[0]
            feat = global_pool(h, "avg") if cfg.light_mode else reshape(h, (b, -1))
            z = relu(fully_connected(feat, p["mlp.fc1.weight"], p["mlp.fc1.bias"]))
            z = relu(fully_connected(z, p["mlp.fc2.weight"], p["mlp.fc2.bias"]))
            gamma = fully_connected(z, p["mlp.gamma.weight"], p["mlp.gamma.bias"])
            beta = fully_connected(z, p["mlp.beta.weight"], p["mlp.beta.bias"])

        for j in range(cfg.n_res):
            r = h
            for k in (1, 2):
                r = conv2d(r, p[f"dec.res{j}.conv{k}.weight"], pad=1, pad_mode="reflect")
                if self.adaptive:
                    g, bt = gamma, beta
                else:
                    g, bt = p[f"dec.res{j}.gamma{k}"], p[f"dec.res{j}.beta{k}"]
                rho = p[f"dec.res{j}.rho{k}"] if cfg.decoder_norm == "adalin" else None
                r = self._norm(r, g, bt, rho)
                if k == 1:
                    r = relu(r)
            h = h + r
        for i in range(1, cfg.n_downsample + 1):
            h = conv2d(upsample_nearest2x(h), p[f"dec.up{i}.weight"], pad=1)
            h = relu(self._up_norm(h, i))
        out = tanh(conv2d(h, p["dec.out.weight"], p["dec.out.bias"], pad=3, pad_mode="reflect"))
        return GenOutput(out, logits, attended)

    __call__ = forward


def build_generator(cfg: NetConfig, seed: int = 0) -> GeneratorNet:
    return GeneratorNet(cfg, seed)


def generator_forward(net: GeneratorNet, x: Tensor):
    out = net.forward(x)
    return out.image, out.cam_logits, out.heatmap


# ---------------------------------------------------------------------------
# discriminators
# ---------------------------------------------------------------------------

def discriminator_downsamples(img_size: int, scale: str) -> int:
    """Number of stride-2 stages for one discriminator scale.

    At 256 px this is the table depth (5 global, 3 local). Smaller inputs keep
    the global stage count as deep as the input allows (final map >= 4 px
    before the two stride-1 convs) and keep the local one two stages shallower.
    """
    if scale not in ("local", "global"):
        raise ValueError(f"scale must be local or global, got {scale!r}")
    fit = int(math.log2(img_size // 4)) if img_size >= 8 else 0
    n_global = min(GLOBAL_DOWNSAMPLES, fit)
    if n_global < 1:
        raise ValueError(f"input {img_size} px is too small for the discriminator stack")
    if scale == "global":
        return n_global
    return max(1, min(LOCAL_DOWNSAMPLES, n_global - 2))


def discriminator_layout(img_size: int, ch: int, scale: str) -> list[tuple]:
    """Conv stack as ``(cin, cout, kernel, stride, pad)`` tuples (classifier last)."""
    n_down = discriminator_downsamples(img_size, scale)
    layers, cin = [], 3
    for i in range(n_down):
        cout = ch * 2 ** i
        layers.append((cin, cout, 4, 2, 1))
        cin = cout
    layers.append((cin, cin * 2, 4, 1, 1))
    layers.append((cin * 2, 1, 4, 1, 1))
    return layers


@dataclass
class DiscOutput:
    scores: Tensor
    cam_logits: Tensor | None
    attended: Tensor

    @property
    def heatmap(self) -> np.ndarray:
        return cam_heatmap(self.attended)


class DiscriminatorNet:
    """Spectral-normalized PatchGAN with CAM attention before the classifier."""

    def __init__(self, cfg: NetConfig, scale: str, seed: int = 0, spectral_norm: bool = True):
        self.cfg = cfg
        self.scale = scale
        self.spectral_norm = spectral_norm
        # Power iteration advances only while this is set (discriminator update).
        self.sn_update = False
        self.layout = discriminator_layout(cfg.img_size, cfg.ch, scale)
        self.params = ParamStore()
        init = _Init(self.params, seed)
        for i, (cin, cout, k, _, _) in enumerate(self.layout[:-1]):
            init.weight(f"conv{i}.weight", (cout, cin, k, k))
            init.zeros(f"conv{i}.bias", (cout,))
        n = self.layout[-1][0]
        if cfg.use_cam:
            init.weight("cam.w_avg", (n,))
            init.weight("cam.w_max", (n,))
            init.weight("cam.fuse.weight", (n, 2 * n, 1, 1))
            init.zeros("cam.fuse.bias", (n,))
        cin, cout, k, _, _ = self.layout[-1]
        init.weight("cls.weight", (cout, cin, k, k))
        init.zeros("cls.bias", (cout,))
        for name, t in self.params.items():
            if t.ndim == 4:
                self.params.spectral[name] = SpectralState.init(
                    t.shape[0], int(np.prod(t.shape[1:])), init.rng, weight=t.data)

    def output_size(self) -> int:
        size = self.cfg.img_size
        for _, _, k, s, pad in self.layout:
            size = conv_output_size(size, k, s, pad)
        return size

    def _w(self, name: str) -> Tensor:
        w = self.params[name]
        if not self.spectral_norm:
            return w
        return spectral_normalize(w, self.params.spectral[name], 1, update=self.sn_update)

    def forward(self, x: Tensor) -> DiscOutput:
        cfg, p = self.cfg, self.params
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (cfg.img_size, cfg.img_size):
            raise ValueError(f"discriminator expects [B, 3, {cfg.img_size}, {cfg.img_size}], got {x.shape}")
        h = x
        for i, (_, _, _, s, pad) in enumerate(self.layout[:-1]):
            h = leaky_relu(conv2d(h, self._w(f"conv{i}.weight"), p[f"conv{i}.bias"],
                                  stride=s, pad=pad), 0.2)
        logits = None
        if cfg.use_cam:
            cam = CamModule(p["cam.w_avg"], p["cam.w_max"], self._w("cam.fuse.weight"),
                            p["cam.fuse.bias"])
            logits = cam_logits(h, cam)
            h = cam_attend(h, cam, "lrelu")
        attended = h
        _, _, _, s, pad = self.layout[-1]
        scores = conv2d(h, self._w("cls.weight"), p["cls.bias"], stride=s, pad=pad)
        return DiscOutput(scores, logits, attended)

    __call__ = forward


def build_discriminator(cfg: NetConfig, scale: str, seed: int = 0) -> DiscriminatorNet:
    return DiscriminatorNet(cfg, scale, seed)


def discriminator_forward(net: DiscriminatorNet, x: Tensor):
    out = net.forward(x)
    return out.scores, out.cam_logits, out.heatmap
