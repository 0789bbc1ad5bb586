"""Scikit-learn style estimator wrapping the model and training loop.

The estimator trains on provided arrays (no augmentation or held-out
split; use the CLI/trainer for the full experiment protocol) and predicts
per-pixel saliency maps. It follows the usual conventions: constructor
arguments are stored verbatim, `fit` returns self, fitted state lives in
trailing-underscore attributes, and `get_params`/`set_params` come from
`BaseEstimator`, so it composes with pipelines and parameter search.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import metrics as metrics_mod
from .model import ModelConfig, SaliencyNet
from .trainer import TrainConfig, fit_arrays
from .validation import check_image_batch, check_mask_batch


class ContourSaliency(BaseEstimator):
    """Boundary-aware saliency segmenter.

    Parameters mirror the model and optimizer settings; `use_contour`
    toggles the boundary-weighted loss and `use_attention` the global
    attention chain.
    """

    def __init__(
        self,
        levels: int = 4,
        use_contour: bool = True,
        use_attention: bool = True,
        contour_k: float = 5.0,
        msg_channels: int = 32,
        lr: float = 1e-5,
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
        encoder_lr_scale: float = 0.05,
        batch_size: int = 8,
        epochs: int = 20,
        lr_step_epochs: int = 10,
        lr_decay: float = 0.5,
        dtype: str = "float32",
        random_state: int = 0,
    ):
        self.levels = levels
        self.use_contour = use_contour
        self.use_attention = use_attention
        self.contour_k = contour_k
        self.msg_channels = msg_channels
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.encoder_lr_scale = encoder_lr_scale
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr_step_epochs = lr_step_epochs
        self.lr_decay = lr_decay
        self.dtype = dtype
        self.random_state = random_state

    def _ablation(self) -> str:
        return {
            (False, False): "B",
            (True, False): "B+C",
            (False, True): "B+H",
            (True, True): "B+C+H",
        }[(bool(self.use_contour), bool(self.use_attention))]

    def fit(self, X, y):
        """Train on images X (N, 3, S, S) in [0, 1] and binary masks y (N, S, S)."""
        X = check_image_batch(X)
        y = check_mask_batch(y, X.shape)
        model_cfg = ModelConfig(
            levels=self.levels,
            input_size=X.shape[2],
            hgam_enabled=bool(self.use_attention),
            msg_channels=self.msg_channels,
            dtype=self.dtype,
        )
        train_cfg = TrainConfig(
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            encoder_lr_scale=self.encoder_lr_scale,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr_step_epochs=self.lr_step_epochs,
            lr_decay=self.lr_decay,
            seed=self.random_state,
            ablation=self._ablation(),
            contour_k=self.contour_k,
        )
        self.model_ = SaliencyNet(model_cfg, seed=self.random_state)
        self.history_ = fit_arrays(self.model_, X, y, train_cfg)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "This ContourSaliency instance is not fitted yet; call fit first."
            )

    def predict(self, X) -> np.ndarray:
        """Saliency maps (N, S, S) with values in (0, 1)."""
        self._require_fitted()
        X = check_image_batch(X)
        size = self.model_.cfg.input_size
        if X.shape[2] != size:
            raise ValueError(f"model was fitted on {size}x{size} images, got {X.shape[2]}")
        out = []
        for start in range(0, X.shape[0], self.batch_size):
            out.append(self.model_.infer(X[start : start + self.batch_size]))
        return np.concatenate(out)

    def score(self, X, y) -> float:
        """Maximum F-beta of the predictions against binary masks."""
        self._require_fitted()
        preds = self.predict(X)
        y = check_mask_batch(y, (preds.shape[0], 3) + preds.shape[1:])
        _, value = metrics_mod.max_fbeta(list(preds), list(y))
        return value
