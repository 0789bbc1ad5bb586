"""SGD-with-momentum training loop, checkpointing and per-epoch evaluation.

The loop is deterministic for a fixed seed: shuffling and augmentation
draw from generators keyed by (seed, stream tag, epoch[, sample index]),
and every kernel accumulates in a fixed order. Two runs with identical
configuration produce identical history files.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from .loss import LossWeights, combined_loss, loss_breakdown, weight_maps_for
from .model import ModelConfig, SaliencyNet, save_checkpoint
from .morphology import WeightMapConfig
from .tensor import Graph, Tensor, backward

# (use_contour, hgam_enabled) per ablation name
ABLATIONS = {
    "B": (False, False),
    "B+C": (True, False),
    "B+H": (False, True),
    "B+C+H": (True, True),
}

_SHUFFLE_TAG = 201
_AUGMENT_TAG = 202


class NonFiniteLossError(RuntimeError):
    """Raised when training produces a NaN/Inf, naming the first bad tensor."""


@dataclass
class TrainConfig:
    lr: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    encoder_lr_scale: float = 0.05
    batch_size: int = 8
    epochs: int = 40
    lr_step_epochs: int = 10
    lr_decay: float = 0.5
    paper_literal_decay: bool = False
    seed: int = 0
    ablation: str = "B+C+H"
    loss_weights: tuple | None = None
    final_weight: float = 1.0
    contour_k: float = 5.0

    def __post_init__(self):
        for name in ("lr", "momentum", "weight_decay", "encoder_lr_scale", "lr_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.batch_size < 1 or self.epochs < 1 or self.lr_step_epochs < 1:
            raise ValueError("batch_size, epochs and lr_step_epochs must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(
                f"ablation must be one of {sorted(ABLATIONS)}, got {self.ablation!r}"
            )

    @property
    def use_contour(self) -> bool:
        return ABLATIONS[self.ablation][0]

    @property
    def hgam_enabled(self) -> bool:
        return ABLATIONS[self.ablation][1]


@dataclass
class TrainResult:
    model: SaliencyNet
    history: list = field(default_factory=list)
    best_state: dict | None = None
    best_fbeta: float = 0.0
    best_epoch: int = -1
    wall_time: float = 0.0


def effective_lr(cfg: TrainConfig, epoch: int, is_encoder: bool) -> float:
    decay = 0.05 if cfg.paper_literal_decay else cfg.lr_decay
    lr = cfg.lr * decay ** (epoch // cfg.lr_step_epochs)
    return lr * cfg.encoder_lr_scale if is_encoder else lr


def sgd_step(
    params: dict,
    velocity: dict,
    cfg: TrainConfig,
    epoch: int,
    encoder_names: set,
) -> None:
    """v <- momentum v + grad + weight_decay w;  w <- w - lr_eff v.

    Gradients are consumed: every parameter must have one, and all are
    cleared after the update.
    """
    for name in sorted(params):
        t = params[name]
        if t.grad is None:
            raise RuntimeError(f"missing gradient for parameter {name}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(t.data)
            velocity[name] = v
        v *= cfg.momentum
        v += t.grad
        if cfg.weight_decay:
            v += cfg.weight_decay * t.data
        t.data = t.data - effective_lr(cfg, epoch, name in encoder_names) * v
        t.grad = None


def _loss_parts(cfg: TrainConfig, levels: int):
    if cfg.loss_weights is not None:
        weights = LossWeights(per_level=tuple(cfg.loss_weights), final_p=cfg.final_weight)
    else:
        weights = LossWeights.for_levels(levels, final_p=cfg.final_weight)
    return weights, WeightMapConfig(k=cfg.contour_k)


def train_step(
    model: SaliencyNet,
    images: np.ndarray,
    masks: np.ndarray,
    cfg: TrainConfig,
    weights: LossWeights,
    wm_cfg: WeightMapConfig,
    velocity: dict,
    epoch: int,
    encoder_names: set,
    collect_terms: bool = False,
):
    """One forward/backward/update on a prepared batch; returns the batch loss."""
    maps = weight_maps_for(masks, wm_cfg) if cfg.use_contour else None
    with Graph() as graph:
        acts = model.forward(Tensor(images))
        total = combined_loss(
            acts.predictions,
            masks,
            weights,
            use_contour=cfg.use_contour,
            weight_maps=maps,
        ) * (1.0 / images.shape[0])
        value = total.item()
        if not np.isfinite(value):
            culprit = graph.first_nonfinite() or "loss output"
            raise NonFiniteLossError(f"non-finite loss; first non-finite tensor: {culprit}")
        backward(graph, total)
    sgd_step(model.params, velocity, cfg, epoch, encoder_names)
    terms = None
    if collect_terms:
        terms = loss_breakdown(
            acts.predictions, masks, use_contour=cfg.use_contour, weight_maps=maps
        )
    return value, terms


def _batch_arrays(samples, indices, dtype, crop, train_aug=False, seed=0, epoch=0):
    images, masks = [], []
    for idx in indices:
        s = samples[idx]
        if not train_aug:
            s = data_mod.augment(s, train=False, crop_size=crop)
        else:
            rng = np.random.default_rng([seed, _AUGMENT_TAG, epoch, int(idx)])
            s = data_mod.augment(
                s, train=True, rng=rng, base_size=s.image.shape[1], crop_size=crop
            )
        images.append(s.image)
        masks.append(s.mask)
    return np.stack(images).astype(dtype), np.stack(masks)


def predict_samples(model: SaliencyNet, samples, batch_size: int = 8):
    """Saliency maps for samples resized to the model input (list of (S, S))."""
    crop = model.cfg.input_size
    preds, gts = [], []
    for start in range(0, len(samples), batch_size):
        chunk = list(range(start, min(start + batch_size, len(samples))))
        images, masks = _batch_arrays(samples, chunk, model.cfg.dtype, crop)
        out = model.infer(images)
        preds.extend(out)
        gts.extend(masks)
    return preds, gts


def train(
    model_cfg: ModelConfig,
    train_samples,
    test_samples,
    cfg: TrainConfig,
    out_dir=None,
    log=None,
) -> TrainResult:
    """Full training run: shuffle, augment, optimize, evaluate each epoch.

    Writes history.csv (epoch, loss, max_fbeta, mae, boundary_mae),
    losses.csv (epoch, total, then unweighted per-output terms) and the
    best-F-beta checkpoint under `out_dir` when given.
    """
    started = time.time()
    model_cfg = dataclasses.replace(model_cfg, hgam_enabled=cfg.hgam_enabled)
    model = SaliencyNet(model_cfg, seed=cfg.seed)
    weights, wm_cfg = _loss_parts(cfg, model_cfg.levels)
    encoder_names = model.encoder_param_names()
    velocity: dict = {}
    result = TrainResult(model=model)

    out_dir = Path(out_dir) if out_dir is not None else None
    history_fh = losses_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        history_fh = open(out_dir / "history.csv", "w")
        history_fh.write("epoch,loss,max_fbeta,mae,boundary_mae\n")
        losses_fh = open(out_dir / "losses.csv", "w")
        term_names = [f"level{model_cfg.levels - i}" for i in range(model_cfg.levels)]
        if cfg.hgam_enabled:
            term_names.append("final")
        losses_fh.write("epoch,total," + ",".join(term_names) + "\n")

    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng(
                [cfg.seed & 0xFFFFFFFFFFFFFFFF, _SHUFFLE_TAG, epoch]
            ).permutation(len(train_samples))
            batch_losses, term_sums, term_count = [], None, 0
            for start in range(0, len(order), cfg.batch_size):
                chunk = order[start : start + cfg.batch_size]
                images, masks = _batch_arrays(
                    train_samples,
                    chunk,
                    model_cfg.dtype,
                    model_cfg.input_size,
                    train_aug=True,
                    seed=cfg.seed & 0xFFFFFFFFFFFFFFFF,
                    epoch=epoch,
                )
                value, terms = train_step(
                    model, images, masks, cfg, weights, wm_cfg, velocity, epoch,
                    encoder_names, collect_terms=losses_fh is not None,
                )
                batch_losses.append(value)
                if terms is not None:
                    term_sums = terms if term_sums is None else [
                        a + b for a, b in zip(term_sums, terms)
                    ]
                    term_count += 1

            mean_loss = float(np.mean(batch_losses))
            preds, gts = predict_samples(model, test_samples, cfg.batch_size)
            report = metrics_mod.evaluate(preds, gts)
            row = {
                "epoch": epoch,
                "loss": mean_loss,
                "max_fbeta": report.max_fbeta,
                "mae": report.mae,
                "boundary_mae": report.boundary_mae,
            }
            result.history.append(row)
            if history_fh is not None:
                history_fh.write(
                    f"{epoch},{mean_loss:.9f},{report.max_fbeta:.9f},"
                    f"{report.mae:.9f},{report.boundary_mae:.9f}\n"
                )
                history_fh.flush()
            if losses_fh is not None and term_count:
                means = ",".join(f"{s / term_count:.9f}" for s in term_sums)
                losses_fh.write(f"{epoch},{mean_loss:.9f},{means}\n")
                losses_fh.flush()
            if report.max_fbeta > result.best_fbeta or result.best_epoch < 0:
                result.best_fbeta = report.max_fbeta
                result.best_epoch = epoch
                result.best_state = {k: v.copy() for k, v in model.state_arrays().items()}
            if log is not None:
                log(
                    f"epoch {epoch:3d}  loss {mean_loss:.4f}  "
                    f"maxF {report.max_fbeta:.4f}  mae {report.mae:.4f}  "
                    f"bmae {report.boundary_mae:.4f}"
                )
    finally:
        if history_fh is not None:
            history_fh.close()
        if losses_fh is not None:
            losses_fh.close()

    if out_dir is not None and result.best_state is not None:
        ckpt = out_dir / "best.ckpt"
        save_checkpoint(ckpt, result.best_state)
        write_model_meta(Path(str(ckpt) + ".meta"), model_cfg, cfg.ablation)
    result.wall_time = time.time() - started
    return result


def fit_arrays(
    model: SaliencyNet,
    images: np.ndarray,
    masks: np.ndarray,
    cfg: TrainConfig,
) -> list[float]:
    """Train on fixed arrays (no augmentation, no held-out split).

    Returns the mean batch loss per epoch.
    """
    weights, wm_cfg = _loss_parts(cfg, model.cfg.levels)
    encoder_names = model.encoder_param_names()
    velocity: dict = {}
    dtype = model.cfg.dtype
    losses = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(
            [cfg.seed & 0xFFFFFFFFFFFFFFFF, _SHUFFLE_TAG, epoch]
        ).permutation(images.shape[0])
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            value, _ = train_step(
                model,
                images[chunk].astype(dtype),
                masks[chunk],
                cfg,
                weights,
                wm_cfg,
                velocity,
                epoch,
                encoder_names,
            )
            batch_losses.append(value)
        losses.append(float(np.mean(batch_losses)))
    return losses


def write_model_meta(path, model_cfg: ModelConfig, ablation: str) -> None:
    """Sidecar describing the architecture a checkpoint belongs to."""
    with open(path, "w") as fh:
        fh.write(f"levels={model_cfg.levels}\n")
        fh.write(f"input_size={model_cfg.input_size}\n")
        fh.write(f"encoder_channels={','.join(map(str, model_cfg.encoder_channels))}\n")
        fh.write(f"decoder_channels={','.join(map(str, model_cfg.decoder_channels))}\n")
        fh.write(f"head_channels={model_cfg.head_channels}\n")
        fh.write(f"msg_channels={model_cfg.msg_channels}\n")
        fh.write(f"hgam_enabled={int(model_cfg.hgam_enabled)}\n")
        fh.write(f"dtype={model_cfg.dtype}\n")
        fh.write(f"ablation={ablation}\n")


def read_model_meta(path) -> ModelConfig:
    fields: dict = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    return ModelConfig(
        levels=int(fields["levels"]),
        input_size=int(fields["input_size"]),
        encoder_channels=tuple(int(v) for v in fields["encoder_channels"].split(",")),
        decoder_channels=tuple(int(v) for v in fields["decoder_channels"].split(",")),
        head_channels=int(fields["head_channels"]),
        msg_channels=int(fields["msg_channels"]),
        hgam_enabled=bool(int(fields["hgam_enabled"])),
        dtype=fields["dtype"],
    )
