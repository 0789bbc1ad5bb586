"""Finite-difference verification of the analytic gradients.

Every check builds a scalar objective (a random fixed projection of the
op output), computes the analytic gradient through the tape, and compares
against central differences at 64-bit with step 1e-5. Inputs are drawn
away from non-differentiable points (ReLU kinks, pooling ties).
"""

from __future__ import annotations

import numpy as np

from . import attention as attn
from . import loss as loss_mod
from . import tensor as T
from .model import ModelConfig, SaliencyNet
from .morphology import WeightMapConfig
from .trainer import TrainConfig

FD_STEP = 1e-5
TOLERANCE = 1e-4


def numerical_gradient(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f w.r.t. every element of x."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a| + |n|, 1e-8), elementwise."""
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-8)))


def check_tensors(build, inputs: list, projection_seed: int = 0) -> float:
    """Max relative FD error over all `inputs` of the graph built by `build`.

    `build` maps the input tensors to an output tensor; the objective is
    a fixed random projection of that output.
    """
    out_shape = build(*[T.Tensor(x) for x in inputs]).shape
    proj = np.random.default_rng(projection_seed).normal(size=out_shape)

    def objective() -> float:
        return float((build(*[T.Tensor(x) for x in inputs]).data * proj).sum())

    tensors = [T.Tensor(x) for x in inputs]
    with T.Graph() as graph:
        out = build(*tensors)
        scalar = T.total(T.mul(out, proj))
        T.backward(graph, scalar)

    worst = 0.0
    for t, x in zip(tensors, inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(x)
        numeric = numerical_gradient(objective, x)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    x = np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)
    return x


def primitive_checks(seed: int = 0) -> list[tuple[str, float]]:
    """FD checks for every differentiable primitive; returns (name, error) rows."""
    rng = np.random.default_rng(seed)
    rows = []

    x = rng.normal(size=(2, 3, 6, 7))
    w = rng.normal(size=(4, 3, 3, 3)) * 0.5
    b = rng.normal(size=4)

    def conv_build(xt, wt, bt, stride=1, padding="same"):
        return T.conv2d(xt, T.LayerParams(weights=wt, bias=bt), stride, padding)

    rows.append(("conv2d(same,stride1)", check_tensors(conv_build, [x, w, b])))
    rows.append(
        (
            "conv2d(pad0,stride2)",
            check_tensors(lambda a, c, d: conv_build(a, c, d, 2, 0), [x, w, b]),
        )
    )
    rows.append(("relu", check_tensors(T.relu, [_away_from_zero(rng, (3, 2, 4, 4))])))
    rows.append(("sigmoid", check_tensors(T.sigmoid, [rng.normal(size=(2, 2, 3, 3))])))
    pool_in = [rng.permutation(36).reshape(1, 1, 6, 6).astype(np.float64) + rng.normal(size=(1, 1, 6, 6)) * 0.01]
    rows.append(("maxpool2d(even)", check_tensors(lambda t: T.maxpool2d(t, 3, 3), pool_in)))
    rows.append(("maxpool2d(uneven)", check_tensors(lambda t: T.maxpool2d(t, 2, 3), pool_in)))
    rows.append(
        ("avgpool2d(even)", check_tensors(lambda t: T.avgpool2d(t, 3, 3), [rng.normal(size=(2, 2, 6, 6))]))
    )
    rows.append(
        ("avgpool2d(uneven)", check_tensors(lambda t: T.avgpool2d(t, 3, 2), [rng.normal(size=(1, 2, 7, 5))]))
    )
    rows.append(
        (
            "upsample_bilinear(up)",
            check_tensors(lambda t: T.upsample_bilinear(t, 9, 11), [rng.normal(size=(1, 2, 4, 5))]),
        )
    )
    rows.append(
        (
            "upsample_bilinear(down)",
            check_tensors(lambda t: T.upsample_bilinear(t, 3, 4), [rng.normal(size=(1, 2, 7, 6))]),
        )
    )
    rows.append(
        (
            "concat_channels",
            check_tensors(
                lambda a, c: T.concat_channels([a, c]),
                [rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 3, 3, 3))],
            ),
        )
    )
    rows.append(("add", check_tensors(lambda a, c: a + c, [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))])))
    rows.append(
        (
            "mul(broadcast)",
            check_tensors(lambda a, c: T.mul(a, c), [rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(2, 1, 3, 3))]),
        )
    )
    rows.append(("div", check_tensors(T.div, [rng.normal(size=(3, 3)), rng.normal(size=(3, 3)) + 3.0])))
    rows.append(("log", check_tensors(T.log, [rng.uniform(0.2, 3.0, (3, 4))])))
    rows.append(("sqrt", check_tensors(T.sqrt, [rng.uniform(0.5, 4.0, (3, 4))])))
    rows.append(
        ("clip", check_tensors(lambda t: T.clip(t, -0.5, 0.5), [_away_from_zero(rng, (4, 4)) * 2]))
    )
    rows.append(("mean", check_tensors(lambda t: T.mean(t, (2, 3)), [rng.normal(size=(2, 3, 4, 4))])))

    rows.append(
        (
            "global_contrast_attention",
            check_tensors(attn.global_contrast_attention, [rng.normal(size=(2, 3, 4, 4)) * 2]),
        )
    )
    rows.append(
        (
            "guide",
            check_tensors(attn.guide, [rng.normal(size=(2, 3, 4, 4)), rng.uniform(0.1, 2.0, (2, 1, 4, 4))]),
        )
    )

    target = (rng.random((2, 1, 5, 5)) < 0.5).astype(np.float64)
    logits = rng.normal(size=(2, 1, 5, 5))
    rows.append(
        ("bce(sigmoid)", check_tensors(lambda z: loss_mod.bce(T.sigmoid(z), target), [logits]))
    )
    wmap = rng.uniform(1.0, 6.0, (2, 1, 5, 5))
    rows.append(
        (
            "contour_loss(sigmoid)",
            check_tensors(lambda z: loss_mod.contour_loss(T.sigmoid(z), target, wmap), [logits]),
        )
    )
    return rows


def model_check(seed: int = 3, n_params: int = 20) -> list[tuple[str, float]]:
    """End-to-end FD check on a small 3-level model with the full objective.

    Verifies the analytic gradient of a random sample of `n_params`
    parameter entries (and a few input pixels) against central
    differences.
    """
    cfg = ModelConfig(
        levels=3,
        input_size=16,
        encoder_channels=(4, 6, 8),
        decoder_channels=(4, 5, 6),
        head_channels=4,
        msg_channels=6,
        hgam_enabled=True,
        dtype="float64",
    )
    model = SaliencyNet(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    image = rng.random((1, 3, 16, 16))
    mask = (rng.random((1, 16, 16)) < 0.5).astype(np.uint8)
    train_cfg = TrainConfig(ablation="B+C+H", seed=seed)
    weights = loss_mod.LossWeights.for_levels(cfg.levels)
    wm_cfg = WeightMapConfig()
    maps = loss_mod.weight_maps_for(mask, wm_cfg)

    def objective() -> float:
        acts = model.forward(T.Tensor(image))
        return combined(acts).item()

    def combined(acts):
        return loss_mod.combined_loss(
            acts.predictions, mask, weights, use_contour=train_cfg.use_contour,
            weight_maps=maps,
        )

    model.zero_grads()
    with T.Graph() as graph:
        image_t = T.Tensor(image)
        acts = model.forward(image_t)
        T.backward(graph, combined(acts))

    samples = []
    names = sorted(model.params)
    for k in range(n_params):
        name = names[int(rng.integers(0, len(names)))]
        arr = model.params[name].data
        flat_idx = int(rng.integers(0, arr.size))
        samples.append((name, flat_idx))

    rows = []
    for name, flat_idx in samples:
        arr = model.params[name].data
        grad = model.params[name].grad
        flat = arr.reshape(-1)
        orig = flat[flat_idx]
        flat[flat_idx] = orig + FD_STEP
        hi = objective()
        flat[flat_idx] = orig - FD_STEP
        lo = objective()
        flat[flat_idx] = orig
        numeric = (hi - lo) / (2.0 * FD_STEP)
        analytic = grad.reshape(-1)[flat_idx] if grad is not None else 0.0
        err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8)
        rows.append((f"model::{name}[{flat_idx}]", float(err)))
    return rows


def full_suite(seed: int = 0) -> list[tuple[str, float]]:
    return primitive_checks(seed) + model_check(seed + 3)
