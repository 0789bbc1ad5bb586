"""Command-line interface: dataset generation, training, evaluation,
inference, weight-map and attention dumps, and gradient checking.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command
prints its resolved configuration before acting and refuses to overwrite
existing outputs unless --force is given.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as data_mod
from . import gradcheck
from . import metrics as metrics_mod
from . import morphology
from .model import CHECKPOINT_VERSION, ModelConfig, SaliencyNet, load_checkpoint
from .trainer import ABLATIONS, TrainConfig, read_model_meta, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _print_config(name: str, items: dict) -> None:
    print(f"[{name}] resolved configuration:")
    for key, value in items.items():
        print(f"  {key} = {value}")


def _ensure_fresh(paths, force: bool) -> None:
    for path in paths:
        if Path(path).exists() and not force:
            raise FileExistsError(f"{path} already exists (pass --force to overwrite)")


def _set_threads(n) -> None:
    if n is not None:
        import numba

        numba.set_num_threads(max(1, int(n)))


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    cfg = dict(
        count=args.count,
        test_count=args.test_count,
        seed=args.seed,
        base_size=args.base_size,
        out=args.out,
        force=args.force,
    )
    _print_config("gen-data", cfg)
    _ensure_fresh([Path(args.out) / "manifest.csv"], args.force)
    train_spec = data_mod.DatasetSpec(
        count=args.count, base_size=args.base_size, crop_size=args.base_size,
        seed=args.seed, split="train",
    )
    train_samples = data_mod.generate(train_spec)
    test_samples = []
    if args.test_count:
        test_spec = data_mod.DatasetSpec(
            count=args.test_count, base_size=args.base_size, crop_size=args.base_size,
            seed=args.seed, split="test",
        )
        test_samples = data_mod.generate(test_spec)
    data_mod.write_dataset(args.out, train_samples, test_samples, force=args.force)
    print(f"wrote {len(train_samples)} train + {len(test_samples)} test samples to {args.out}")
    return 0


_TRAIN_DEFAULTS = {
    "lr": 1e-5,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "encoder_lr_scale": 0.05,
    "batch_size": 8,
    "epochs": 40,
    "lr_step_epochs": 10,
    "lr_decay": 0.5,
    "paper_literal_decay": False,
    "seed": 0,
    "ablation": "B+C+H",
    "final_weight": 1.0,
    "contour_k": 5.0,
    "levels": 4,
    "input_size": 64,
    "msg_channels": 32,
    "dtype": "float32",
}


def _read_config_file(path) -> dict:
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {line!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _resolve_train_options(args) -> dict:
    file_values = _read_config_file(args.config) if args.config else {}
    unknown = set(file_values) - set(_TRAIN_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for key, default in _TRAIN_DEFAULTS.items():
        cli_value = getattr(args, key)
        if cli_value is not None:
            resolved[key] = cli_value
        elif key in file_values:
            raw = file_values[key]
            if isinstance(default, bool):
                resolved[key] = raw.lower() in ("1", "true", "yes")
            else:
                resolved[key] = type(default)(raw)
        else:
            resolved[key] = default
    if args.loss_weights is not None:
        resolved["loss_weights"] = tuple(float(v) for v in args.loss_weights.split(","))
    elif "loss_weights" in file_values:
        resolved["loss_weights"] = tuple(
            float(v) for v in file_values["loss_weights"].split(",")
        )
    else:
        resolved["loss_weights"] = None
    return resolved


def _cmd_train(args) -> int:
    opts = _resolve_train_options(args)
    _print_config("train", {**opts, "data": args.data, "out": args.out})
    out = Path(args.out)
    _ensure_fresh([out / "history.csv", out / "best.ckpt"], args.force)
    _, train_samples = data_mod.load_dataset(args.data, split="train")
    _, test_samples = data_mod.load_dataset(args.data, split="test")
    if not train_samples or not test_samples:
        raise ValueError(f"dataset under {args.data} needs both train and test splits")
    model_cfg = ModelConfig(
        levels=opts["levels"],
        input_size=opts["input_size"],
        msg_channels=opts["msg_channels"],
        dtype=opts["dtype"],
    )
    train_cfg = TrainConfig(
        lr=opts["lr"],
        momentum=opts["momentum"],
        weight_decay=opts["weight_decay"],
        encoder_lr_scale=opts["encoder_lr_scale"],
        batch_size=opts["batch_size"],
        epochs=opts["epochs"],
        lr_step_epochs=opts["lr_step_epochs"],
        lr_decay=opts["lr_decay"],
        paper_literal_decay=opts["paper_literal_decay"],
        seed=opts["seed"],
        ablation=opts["ablation"],
        loss_weights=opts["loss_weights"],
        final_weight=opts["final_weight"],
        contour_k=opts["contour_k"],
    )
    result = train(
        model_cfg, train_samples, test_samples, train_cfg, out_dir=out, log=print
    )
    print(
        f"best max F-beta {result.best_fbeta:.4f} at epoch {result.best_epoch}; "
        f"wall time {result.wall_time:.1f}s"
    )
    return 0


def _load_model(args) -> SaliencyNet:
    meta_path = Path(str(args.checkpoint) + ".meta")
    if meta_path.exists():
        cfg = read_model_meta(meta_path)
    else:
        cfg = ModelConfig(
            levels=args.levels,
            input_size=args.input_size,
            msg_channels=args.msg_channels,
            hgam_enabled=args.hgam,
            dtype="float32",
        )
    model = SaliencyNet(cfg, seed=0)
    model.load_state(load_checkpoint(args.checkpoint))
    return model


def _cmd_infer(args) -> int:
    _print_config("infer", dict(checkpoint=args.checkpoint, data=args.data,
                                split=args.split, out=args.out, force=args.force))
    model = _load_model(args)
    ids, samples = data_mod.load_dataset(args.data, split=args.split)
    if not samples:
        raise ValueError(f"no samples in split {args.split!r} under {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _ensure_fresh([out / f"{ids[0]}.pgm"], args.force)
    crop = model.cfg.input_size
    for start in range(0, len(samples), args.batch_size):
        chunk = samples[start : start + args.batch_size]
        arrays = np.stack(
            [data_mod.augment(s, train=False, crop_size=crop).image for s in chunk]
        ).astype(model.cfg.dtype)
        preds = model.infer(arrays)
        for sid, pred in zip(ids[start : start + args.batch_size], preds):
            data_mod.write_saliency(out / f"{sid}.pgm", pred)
    print(f"wrote {len(samples)} saliency maps to {out}")
    return 0


def _cmd_eval(args) -> int:
    _print_config("eval", dict(preds=args.preds, data=args.data, split=args.split,
                               out=args.out, beta_sq=args.beta_sq,
                               band_radius=args.band_radius, force=args.force))
    out = Path(args.out)
    _ensure_fresh([out / "pr_curve.csv", out / "report.txt"], args.force)
    ids, samples = data_mod.load_dataset(args.data, split=args.split)
    preds, gts = [], []
    for sid, sample in zip(ids, samples):
        path = Path(args.preds) / f"{sid}.pgm"
        if not path.exists():
            raise FileNotFoundError(f"no prediction for sample {sid}: {path}")
        pred = data_mod.read_saliency(path)
        mask = sample.mask
        if mask.shape != pred.shape:
            mask = data_mod.resize_nearest(mask, *pred.shape)
        preds.append(pred)
        gts.append(mask)
    cfg = metrics_mod.MetricsConfig(beta_sq=args.beta_sq, boundary_band_radius=args.band_radius)
    report = metrics_mod.evaluate(preds, gts, cfg)
    metrics_mod.write_report(report, out)
    print(
        f"max_fbeta={report.max_fbeta:.6f} (t={report.best_threshold}) "
        f"mae={report.mae:.6f} boundary_mae={report.boundary_mae:.6f} "
        f"samples={report.sample_count}"
    )
    return 0


def _cmd_weightmap(args) -> int:
    _print_config("weightmap", dict(mask=args.mask, k=args.k, se_size=args.se_size,
                                    gauss_size=args.gauss_size, gauss_sigma=args.gauss_sigma,
                                    out=args.out, force=args.force))
    out = Path(args.out)
    _ensure_fresh([out / "weight.csv", out / "weight.pgm"], args.force)
    out.mkdir(parents=True, exist_ok=True)
    mask = data_mod.read_mask(args.mask)
    cfg = morphology.WeightMapConfig(
        k=args.k, se_size=args.se_size, gauss_size=args.gauss_size,
        gauss_sigma=args.gauss_sigma,
    )
    wmap = morphology.contour_weight_map(mask, cfg)
    np.savetxt(out / "weight.csv", wmap, delimiter=",", fmt="%.9f")
    # scale so value 1 -> byte 0 and value k+1 -> byte 255
    data_mod.write_pgm(out / "weight.pgm", data_mod.quantize_saliency((wmap - 1.0) / args.k))
    print(f"weight map range [{wmap.min():.4f}, {wmap.max():.4f}] written to {out}")
    return 0


def _cmd_attn(args) -> int:
    _print_config("attn", dict(checkpoint=args.checkpoint, image=args.image,
                               out=args.out, force=args.force))
    model = _load_model(args)
    if not model.cfg.hgam_enabled:
        raise ValueError("checkpoint was trained without the attention chain")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _ensure_fresh([out / "atten_l1.pgm"], args.force)
    image = data_mod.read_ppm(args.image)
    size = model.cfg.input_size
    if image.shape[1:] != (size, size):
        image = data_mod.resize_bilinear(image, size, size)
    maps = model.attention_maps(image[None].astype(model.cfg.dtype))
    for level, amap in enumerate(maps, start=1):
        plane = amap[0]
        span = plane.max() - plane.min()
        norm = (plane - plane.min()) / span if span > 0 else np.zeros_like(plane)
        data_mod.write_pgm(out / f"atten_l{level}.pgm", data_mod.quantize_saliency(norm))
    print(f"wrote {len(maps)} attention maps to {out}")
    return 0


def _cmd_grad_check(args) -> int:
    _print_config("grad-check", dict(seed=args.seed))
    rows = gradcheck.full_suite(args.seed)
    width = max(len(name) for name, _ in rows)
    worst = 0.0
    for name, err in rows:
        flag = "ok" if err < gradcheck.TOLERANCE else "FAIL"
        print(f"{name:<{width}}  {err:12.3e}  {flag}")
        worst = max(worst, err)
    print(f"worst relative error: {worst:.3e} (tolerance {gradcheck.TOLERANCE:.0e})")
    return 0 if worst < gradcheck.TOLERANCE else 2


# ---------------------------------------------------------------------------
# parser wiring


def _add_model_flags(p) -> None:
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--msg-channels", type=int, default=32)
    p.add_argument("--hgam", action="store_true", help="model includes the attention chain")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="contourseg", description=__doc__)
    parser.add_argument(
        "--version",
        action="version",
        version=f"contourseg {__version__} (checkpoint format v{CHECKPOINT_VERSION})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shape dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--test-count", type=int, default=0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--base-size", type=int, default=72)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key=value file; CLI flags win")
    p.add_argument("--force", action="store_true")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--encoder-lr-scale", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr-step-epochs", type=int, default=None)
    p.add_argument("--lr-decay", type=float, default=None)
    p.add_argument("--paper-literal-decay", action="store_const", const=True, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ablation", choices=sorted(ABLATIONS), default=None)
    p.add_argument("--loss-weights", default=None, help="comma list, deepest output first")
    p.add_argument("--final-weight", type=float, default=None)
    p.add_argument("--contour-k", type=float, default=None)
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--input-size", type=int, default=None)
    p.add_argument("--msg-channels", type=int, default=None)
    p.add_argument("--dtype", choices=("float32", "float64"), default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="write saliency maps for a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--force", action="store_true")
    p.add_argument("--threads", type=int, default=None)
    _add_model_flags(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score saliency files against dataset masks")
    p.add_argument("--preds", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--beta-sq", type=float, default=0.3)
    p.add_argument("--band-radius", type=int, default=2)
    p.add_argument("--force", action="store_true")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("weightmap", help="dump the boundary weight map of a mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--k", type=float, default=5.0)
    p.add_argument("--se-size", type=int, default=5)
    p.add_argument("--gauss-size", type=int, default=5)
    p.add_argument("--gauss-sigma", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_weightmap)

    p = sub.add_parser("attn", help="dump per-level attention maps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--threads", type=int, default=None)
    _add_model_flags(p)
    p.set_defaults(func=_cmd_attn)

    p = sub.add_parser("grad-check", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _set_threads(getattr(args, "threads", None))
        return args.func(args)
    except BrokenPipeError:
        return 2
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
