"""Checkpoints, images and the flat run-config format."""
from __future__ import annotations

import ast
import os
import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .networks import NetConfig
from .training import LossWeights, Models, TrainState

MAGIC = b"UGIT"
VERSION = 1
IMAGE_SUFFIXES = (".png", ".ppm")


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_STATE_FIELDS = ("total_iters", "decay_start", "lr", "weight_decay", "beta1", "beta2", "eps",
                 "seed")


def _header_text(cfg: NetConfig, state: TrainState) -> str:
    lines = [f"net.{k}={v!r}" for k, v in cfg.to_dict().items()]
    lines.append(f"net.mlp_input={'pooled' if cfg.light_mode else 'flattened'!r}")
    lines += [f"state.{k}={getattr(state, k)!r}" for k in _STATE_FIELDS]
    return "\n".join(lines) + "\n"


def _parse_header(text: str):
    net, state = {}, {}
    for line in text.splitlines():
        key, _, raw = line.partition("=")
        scope, _, name = key.partition(".")
        try:
            value = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            raise CheckpointError(f"corrupt header line {line!r}") from None
        if scope == "net" and name != "mlp_input":
            net[name] = value
        elif scope == "state":
            state[name] = value
    return NetConfig.from_dict(net), state


def checkpoint_tensors(models: Models, state: TrainState) -> dict[str, np.ndarray]:
    """Flatten every persistent array into one name -> array mapping."""
    out = {}
    for net_name, net in models.nets().items():
        for name, t in net.params.items():
            out[f"{net_name}.{name}"] = t.data
        for name, sn in net.params.spectral.items():
            out[f"{net_name}.{name}#sn_u"] = sn.u
            out[f"{net_name}.{name}#sn_v"] = sn.v
    for key in sorted(state.moments):
        m, v = state.moments[key]
        out[f"adam.m/{key}"] = m
        out[f"adam.v/{key}"] = v
    return out


def encode_checkpoint(models: Models, state: TrainState) -> bytes:
    header = _header_text(models.cfg, state).encode("utf-8")
    tensors = checkpoint_tensors(models, state)
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header,
             struct.pack("<Q", state.iteration), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, models: Models, state: TrainState) -> None:
    """Write atomically: the file appears only once completely written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(models, state))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes):
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint")
    (crc,) = struct.unpack("<I", buf[-4:])
    body = buf[:-4]
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    crc_ok = zlib.crc32(body) & 0xFFFFFFFF == crc
    try:
        parsed = _parse_body(r)
    except CheckpointError:
        if crc_ok:
            raise
        # A short file usually fails while parsing; name that before the CRC.
        raise CheckpointError("truncated checkpoint (CRC mismatch)") from None
    if not crc_ok:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt")
    return parsed


def _parse_body(r: "_Reader"):
    (hlen,) = r.unpack("<I")
    try:
        header = r.take(hlen).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("corrupt header") from None
    (iteration,) = r.unpack("<Q")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("corrupt record name") from None
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after tensor records")
    return header, iteration, tensors


def load_checkpoint(path):
    """Rebuild ``(models, state)``; every stored tensor must match the architecture."""
    header, iteration, tensors = decode_checkpoint(Path(path).read_bytes())
    cfg, state_fields = _parse_header(header)
    state = TrainState(**state_fields)
    state.iteration = iteration
    models = Models(cfg, state.seed)
    expected = checkpoint_tensors(models, TrainState())
    for key in expected:
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {key}")
    for net_name, net in models.nets().items():
        for name, t in net.params.items():
            t.data = _match(tensors, f"{net_name}.{name}", t.data.shape)
        for name, sn in net.params.spectral.items():
            sn.u = _match(tensors, f"{net_name}.{name}#sn_u", sn.u.shape)
            sn.v = _match(tensors, f"{net_name}.{name}#sn_v", sn.v.shape)
    for key in tensors:
        if key.startswith("adam.m/"):
            name = key[len("adam.m/"):]
            if f"adam.v/{name}" not in tensors:
                raise CheckpointError(f"checkpoint lacks second moment for {name}")
            state.moments[name] = (tensors[key].copy(), tensors[f"adam.v/{name}"].copy())
        elif not key.startswith("adam.v/") and key not in expected:
            raise CheckpointError(f"unexpected tensor {key}")
    return models, state


def _match(tensors, key, shape):
    arr = tensors[key]
    if arr.shape != tuple(shape):
        raise CheckpointError(f"{key}: stored shape {arr.shape}, expected {tuple(shape)}")
    return arr.copy()


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"image directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def read_image(path, img_size: int | None = None) -> np.ndarray:
    """Read an 8-bit RGB PNG/PPM as ``[3, H, W]`` float32 in [-1, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise ValueError(f"{path}: expected an RGB image, got mode {im.mode}")
            if img_size is not None and im.size != (img_size, img_size):
                im = im.resize((img_size, img_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except OSError as exc:
        raise ValueError(f"unreadable image {path}: {exc}") from exc
    return (arr / 127.5 - 1.0).transpose(2, 0, 1).astype(np.float32)


def load_image_dir(directory, img_size: int | None = None) -> np.ndarray:
    """All images of a directory (lexicographic order) as ``[N, 3, H, W]``."""
    paths = list_images(directory)
    if not paths:
        raise ValueError(f"no PNG/PPM images in {directory}")
    return np.stack([read_image(p, img_size) for p in paths])


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` in [-1, 1] -> ``[H, W, 3]`` uint8."""
    return np.clip(np.rint((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def save_image(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), "RGB").save(path)


def save_heatmap(path, heat: np.ndarray) -> None:
    """``[1, H, W]`` or ``[H, W]`` map in [0, 1] -> 8-bit grayscale PNG."""
    h = np.asarray(heat).reshape(heat.shape[-2:])
    Image.fromarray(np.clip(np.rint(h * 255.0), 0, 255).astype(np.uint8), "L").save(path)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    data_a: str = ""
    data_b: str = ""
    img_size: int = 32
    ch: int = 16
    n_res: int = 4
    light_mode: bool = False
    use_cam: bool = True
    decoder_norm: str = "adalin"
    iters: int = 2000
    decay_start: int = -1            # -1: half of iters
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lambda_adv: float = 1.0
    lambda_cycle: float = 10.0
    lambda_identity: float = 10.0
    lambda_cam: float = 1000.0
    seed: int = 0
    out_dir: str = "runs/ugatit"
    kid_subset: int = 100
    kid_repeats: int = 10
    sample_every: int = 1000
    ckpt_every: int = 1000
    augment: bool = True

    def net_config(self) -> NetConfig:
        return NetConfig(img_size=self.img_size, ch=self.ch, n_res=self.n_res,
                         light_mode=self.light_mode, use_cam=self.use_cam,
                         decoder_norm=self.decoder_norm)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_adv, self.lambda_cycle, self.lambda_identity,
                           self.lambda_cam)

    def train_state(self) -> TrainState:
        decay = self.iters // 2 if self.decay_start < 0 else self.decay_start
        return TrainState(total_iters=self.iters, decay_start=decay, lr=self.lr,
                          weight_decay=self.weight_decay, seed=self.seed)

    def check_paths(self) -> None:
        for key in ("data_a", "data_b"):
            if not Path(getattr(self, key)).is_dir():
                raise FileNotFoundError(f"{key}: directory not found: {getattr(self, key)!r}")


def _coerce(kind, raw: str, key: str):
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def parse_config(text: str, base_dir=None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors.

    Relative data/output paths resolve against ``base_dir`` when given.
    """
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(types[key], raw, key)
    cfg = RunConfig(**values)
    if base_dir is not None:
        for key in ("data_a", "data_b", "out_dir"):
            p = getattr(cfg, key)
            if p and not os.path.isabs(p):
                setattr(cfg, key, str(Path(base_dir) / p))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)
