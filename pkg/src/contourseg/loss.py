"""Cross entropy, its contour-weighted variant, and the multi-output objective.

All losses use sum reduction over every element (batch included); the
trainer divides by the batch size so learning rates are independent of
batch composition. Predictions are clamped to [1e-7, 1 - 1e-7] before the
logs, keeping every per-pixel term bounded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import morphology
from .tensor import ShapeMismatchError, Tensor, clip, log, mul, neg, total

PROB_EPS = 1e-7

# canonical deep-to-shallow output weights; a model with L levels uses the last L
CANONICAL_LEVEL_WEIGHTS = (0.3, 0.4, 0.6, 0.8, 1.0)


@dataclass
class LossWeights:
    """Weights for the hierarchical outputs (deepest first) plus the fused output."""

    per_level: tuple = CANONICAL_LEVEL_WEIGHTS
    final_p: float = 1.0

    def __post_init__(self):
        self.per_level = tuple(float(w) for w in self.per_level)
        if not self.per_level or any(w <= 0 for w in self.per_level):
            raise ValueError(f"per-level weights must be positive, got {self.per_level}")
        if self.final_p <= 0:
            raise ValueError(f"final output weight must be positive, got {self.final_p}")

    @classmethod
    def for_levels(cls, levels: int, final_p: float = 1.0) -> "LossWeights":
        """Keep the finest `levels` entries of the canonical weight ladder."""
        if levels > len(CANONICAL_LEVEL_WEIGHTS):
            raise ValueError(f"no canonical weights for {levels} levels")
        return cls(per_level=CANONICAL_LEVEL_WEIGHTS[-levels:], final_p=final_p)


@dataclass
class PredictionSet:
    """Saliency outputs of one forward pass.

    `hierarchical` is ordered deepest (coarsest supervision) first;
    `final` is the attention-fused output when the model produces one.
    """

    hierarchical: list = field(default_factory=list)
    final: Tensor | None = None

    def __post_init__(self):
        if not self.hierarchical:
            raise ValueError("prediction set needs at least one hierarchical output")

    @property
    def inference_output(self) -> Tensor:
        """The map used at test time: the fused output, else the finest level."""
        return self.final if self.final is not None else self.hierarchical[-1]


def _align(arr: np.ndarray, pred: Tensor, what: str) -> np.ndarray:
    """Match a target/weight array to the prediction's shape.

    Accepts an exact shape match, or an (N, H, W) array against an
    (N, 1, H, W) prediction.
    """
    arr = np.asarray(arr)
    if arr.shape == pred.shape:
        pass
    elif (
        pred.ndim == 4
        and pred.shape[1] == 1
        and arr.ndim == 3
        and arr.shape == (pred.shape[0],) + pred.shape[2:]
    ):
        arr = arr.reshape(pred.shape)
    else:
        raise ShapeMismatchError(
            f"{what} shape {arr.shape} does not match prediction shape {tuple(pred.shape)}"
        )
    return arr.astype(pred.dtype, copy=False)


def _log_terms(pred: Tensor, target: np.ndarray):
    y = _align(target, pred, "target")
    p = clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    return mul(log(p), y) + mul(log(1.0 - p), 1.0 - y)


def bce(pred: Tensor, target: np.ndarray) -> Tensor:
    """Binary cross entropy, summed over all elements."""
    return neg(total(_log_terms(pred, target)))


def contour_loss(pred: Tensor, target: np.ndarray, weight_map: np.ndarray) -> Tensor:
    """Cross entropy with per-pixel weights emphasizing boundary regions.

    With the prediction produced by a sigmoid over logits z, the gradient
    w.r.t. z is weight_map * (pred - target) elementwise.
    """
    m = _align(weight_map, pred, "weight map")
    if (m < 1.0).any():
        raise ValueError(f"corrupt weight map: minimum value {m.min()} is below 1")
    return neg(total(mul(_log_terms(pred, target), m)))


def weight_maps_for(target: np.ndarray, cfg: morphology.WeightMapConfig | None = None) -> np.ndarray:
    """Boundary weight maps for a single mask (H, W) or a batch (N, H, W)."""
    target = np.asarray(target)
    if target.ndim == 2:
        return morphology.contour_weight_map(target, cfg)
    if target.ndim == 3:
        return np.stack([morphology.contour_weight_map(m, cfg) for m in target])
    raise ShapeMismatchError(f"expected (H, W) or (N, H, W) masks, got shape {target.shape}")


def combined_loss(
    preds: PredictionSet,
    target: np.ndarray,
    weights: LossWeights | None = None,
    use_contour: bool = False,
    wm_cfg: morphology.WeightMapConfig | None = None,
    weight_maps: np.ndarray | None = None,
) -> Tensor:
    """Weighted sum of the per-output losses over a prediction set.

    The same per-output loss (contour-weighted or plain cross entropy) is
    applied to every hierarchical output and, when present, to the fused
    output. The boundary weight map depends only on the target, so it is
    computed once and shared across outputs; pass `weight_maps` to reuse
    maps computed elsewhere.
    """
    if weights is None:
        weights = LossWeights.for_levels(len(preds.hierarchical))
    if len(weights.per_level) != len(preds.hierarchical):
        raise ValueError(
            f"{len(weights.per_level)} level weights for "
            f"{len(preds.hierarchical)} hierarchical outputs"
        )
    maps = None
    if use_contour:
        maps = weight_maps if weight_maps is not None else weight_maps_for(target, wm_cfg)

    def term(pred: Tensor) -> Tensor:
        if maps is None:
            return bce(pred, target)
        return contour_loss(pred, target, maps)

    out = None
    for w, pred in zip(weights.per_level, preds.hierarchical):
        piece = mul(term(pred), w)
        out = piece if out is None else out + piece
    if preds.final is not None:
        out = out + mul(term(preds.final), weights.final_p)
    return out


def loss_breakdown(
    preds: PredictionSet,
    target: np.ndarray,
    use_contour: bool,
    wm_cfg: morphology.WeightMapConfig | None = None,
    weight_maps: np.ndarray | None = None,
) -> list[float]:
    """Unweighted per-output loss values (deepest first, fused output last)."""
    maps = None
    if use_contour:
        maps = weight_maps if weight_maps is not None else weight_maps_for(target, wm_cfg)
    outs = list(preds.hierarchical)
    if preds.final is not None:
        outs.append(preds.final)
    values = []
    for pred in outs:
        t = bce(pred, target) if maps is None else contour_loss(pred, target, maps)
        values.append(t.item())
    return values
