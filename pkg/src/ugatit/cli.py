"""Command-line entry point: train, translate, evaluate, gradcheck."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io
from .kid import RandomProjectionExtractor, feature_extract, kid_score
from .training import Models, log_header, train, translate

CKPT_SUFFIX = ".ugit"


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _sample_grid(models: Models, data_a: np.ndarray, data_b: np.ndarray, n: int = 4) -> np.ndarray:
    """Rows of ``real A | A->B | real B | B->A`` as one ``[3, H, W]`` image."""
    a, b = data_a[:n], data_b[:n]
    fake_b, _ = translate(models.genA2B, a)
    fake_a, _ = translate(models.genB2A, b)
    k = min(len(a), len(b))
    rows = [np.concatenate([a[i], fake_b[i], b[i], fake_a[i]], axis=2) for i in range(k)]
    return np.concatenate(rows, axis=1)


def cmd_train(args) -> int:
    cfg = io.load_config(args.config)
    cfg.check_paths()
    data_a = io.load_image_dir(cfg.data_a, cfg.img_size)
    data_b = io.load_image_dir(cfg.data_b, cfg.img_size)
    net_cfg = cfg.net_config()
    if args.resume:
        models, state = io.load_checkpoint(args.resume)
        if models.cfg != net_cfg:
            raise ValueError(f"checkpoint network {models.cfg} differs from config {net_cfg}")
        # The config owns the schedule, so a resumed run can be extended.
        fresh = cfg.train_state()
        for key in ("total_iters", "decay_start", "lr", "weight_decay"):
            setattr(state, key, getattr(fresh, key))
    else:
        models, state = Models(net_cfg, cfg.seed), cfg.train_state()

    out = Path(cfg.out_dir)
    ckpt_dir, sample_dir = out / "checkpoints", out / "samples"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss.log"
    append = bool(args.resume) and log_path.exists()
    weights = cfg.weights()

    def on_step(it, _bundle):
        if cfg.ckpt_every > 0 and it % cfg.ckpt_every == 0:
            io.save_checkpoint(ckpt_dir / f"ckpt_{it:07d}{CKPT_SUFFIX}", models, state)
        if cfg.sample_every > 0 and it % cfg.sample_every == 0:
            sample_dir.mkdir(exist_ok=True)
            io.save_image(sample_dir / f"sample_{it:07d}.png", _sample_grid(models, data_a, data_b))

    remaining = max(0, state.total_iters - state.iteration)
    with open(log_path, "a" if append else "w") as log:
        if not append:
            log.write(log_header(net_cfg.use_cam) + "\n")
        train(models, data_a, data_b, state, weights, remaining, log=log, augment=cfg.augment,
              callback=on_step)
    io.save_checkpoint(ckpt_dir / f"last{CKPT_SUFFIX}", models, state)
    print(f"trained to iteration {state.iteration}; log {log_path}")
    return 0


# ---------------------------------------------------------------------------
# translate / evaluate / gradcheck
# ---------------------------------------------------------------------------

def _upsample(heat: np.ndarray, size: int) -> np.ndarray:
    h = heat.reshape(heat.shape[-2:])
    f = max(1, size // h.shape[0])
    return np.kron(h, np.ones((f, f)))


def cmd_translate(args) -> int:
    models, _ = io.load_checkpoint(args.ckpt)
    gen = models.genA2B if args.direction == "a2b" else models.genB2A
    paths = io.list_images(getattr(args, "in"))
    if not paths:
        raise ValueError(f"no PNG/PPM images in {getattr(args, 'in')}")
    size = models.cfg.img_size
    images = np.stack([io.read_image(p, size) for p in paths])
    fakes, heats = translate(gen, images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.heatmaps:
        # Kept apart so the output directory stays a valid RGB image set.
        (out / "heatmaps").mkdir(exist_ok=True)
    for p, img, heat in zip(paths, fakes, heats):
        io.save_image(out / f"{p.stem}_{args.direction}.png", img)
        if args.heatmaps:
            io.save_heatmap(out / "heatmaps" / f"{p.stem}_{args.direction}_heatmap.png",
                            _upsample(heat, size))
    print(f"translated {len(paths)} images into {out}")
    return 0


def cmd_evaluate(args) -> int:
    real = io.load_image_dir(args.real)
    fake = io.load_image_dir(args.fake)
    if real.shape[1:] != fake.shape[1:] or real.shape[2] != real.shape[3]:
        raise ValueError(f"image sizes differ or are not square: {real.shape[1:]} vs {fake.shape[1:]}")
    extractor = RandomProjectionExtractor(real.shape[2])
    subset = args.subset if args.subset is not None else min(100, len(real), len(fake))
    report = kid_score(feature_extract(real, extractor, "real"),
                       feature_extract(fake, extractor, "fake"),
                       subset_size=subset, n_subsets=args.repeats, seed=args.seed)
    print(report.summary())
    print(report.key_values())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradient_suite

    result = gradient_suite(args.size, args.ch, args.n_res, args.tol, seed=args.seed)
    for line in result.lines():
        print(line)
    verdict = "PASS" if result.passed else "FAIL"
    print(f"{verdict}: max relative error {result.max_rel_error:.3e} "
          f"(tolerance {args.tol:g}, {result.seconds:.1f}s)")
    return 0 if result.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ugatit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train both translation directions")
    p.add_argument("--config", required=True, help="flat key=value run configuration")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate a directory of images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--direction", choices=("a2b", "b2a"), default="a2b")
    p.add_argument("--heatmaps", action="store_true", help="also write attention heatmaps")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="KID between two image directories")
    p.add_argument("--real", required=True, metavar="DIR")
    p.add_argument("--fake", required=True, metavar="DIR")
    p.add_argument("--subset", type=int, default=None, help="subset size (default min(100, n))")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of both objectives")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--ch", type=int, default=8)
    p.add_argument("--n-res", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"ugatit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
