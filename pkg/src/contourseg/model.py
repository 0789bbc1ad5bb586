"""Miniature pyramid network: encoder, residual decoder, prediction heads,
and the optional attention chain producing a fused final output.

Level 1 is the finest (full-resolution) level; level L the deepest. All
parameters live in a flat name -> Tensor mapping so the optimizer and the
checkpoint format can treat them uniformly. Each parameter is initialized
from its own name-derived random stream, so enabling or disabling the
attention chain never changes the initialization of the shared trunk.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import attention as attn
from .loss import PredictionSet
from .tensor import (
    LayerParams,
    ShapeMismatchError,
    Tensor,
    concat_channels,
    conv2d,
    maxpool2d,
    relu,
    sigmoid,
    upsample_bilinear,
)

CHECKPOINT_MAGIC = b"CSKT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed or incompatible checkpoint files."""


_ENCODER_LADDER = (16, 32, 64, 128, 128, 128)
_DECODER_LADDER = (12, 16, 24, 32, 48, 64)


@dataclass
class ModelConfig:
    levels: int = 4
    input_size: int = 64
    encoder_channels: tuple | None = None
    decoder_channels: tuple | None = None
    head_channels: int = 8
    msg_channels: int = 32
    hgam_enabled: bool = False
    attention: attn.AttentionConfig = field(default_factory=attn.AttentionConfig)
    dtype: str = "float64"

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"need at least 2 levels, got {self.levels}")
        if self.input_size % (1 << (self.levels - 1)) != 0:
            raise ValueError(
                f"input size {self.input_size} is not divisible by 2^{self.levels - 1}"
            )
        if self.encoder_channels is None:
            if self.levels > len(_ENCODER_LADDER):
                raise ValueError(f"pass encoder_channels explicitly for {self.levels} levels")
            self.encoder_channels = _ENCODER_LADDER[: self.levels]
        if self.decoder_channels is None:
            if self.levels > len(_DECODER_LADDER):
                raise ValueError(f"pass decoder_channels explicitly for {self.levels} levels")
            self.decoder_channels = _DECODER_LADDER[: self.levels]
        self.encoder_channels = tuple(self.encoder_channels)
        self.decoder_channels = tuple(self.decoder_channels)
        if len(self.encoder_channels) != self.levels:
            raise ValueError("encoder_channels must list one width per level")
        if len(self.decoder_channels) != self.levels:
            raise ValueError("decoder_channels must list one width per level")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    def grid(self, level: int) -> int:
        """Spatial extent of the given 1-based level."""
        return self.input_size >> (level - 1)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """The 5-level, 224-input configuration (trained from scratch)."""
        base = dict(
            levels=5,
            input_size=224,
            encoder_channels=(64, 128, 256, 512, 512),
            decoder_channels=(32, 48, 64, 96, 128),
            head_channels=16,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class NetworkActivations:
    """Everything one forward pass produces, finest level first in each list."""

    encoded: list
    residual: list
    upsampled: list
    predictions: PredictionSet
    guided: list | None = None
    attention_states: list | None = None


def _name_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


class SaliencyNet:
    """The pyramid model; construct with a config and an initialization seed."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._layers: dict[str, LayerParams] = {}
        self._build()

    # -- construction -------------------------------------------------------

    def _conv_layer(self, name: str, in_c: int, out_c: int, k: int) -> LayerParams:
        dtype = np.dtype(self.cfg.dtype)
        rng = _name_rng(self.seed, name)
        std = np.sqrt(2.0 / (in_c * k * k))
        w = Tensor(rng.normal(0.0, std, (out_c, in_c, k, k)).astype(dtype))
        b = Tensor(np.zeros(out_c, dtype))
        layer = LayerParams(weights=w, bias=b)
        self.params[f"{name}.weight"] = w
        self.params[f"{name}.bias"] = b
        self._layers[name] = layer
        return layer

    def _build(self):
        cfg = self.cfg
        enc, dec = cfg.encoder_channels, cfg.decoder_channels
        for i in range(1, cfg.levels + 1):
            in_c = 3 if i == 1 else enc[i - 2]
            self._conv_layer(f"encoder.l{i}.conv1", in_c, enc[i - 1], 3)
            self._conv_layer(f"encoder.l{i}.conv2", enc[i - 1], enc[i - 1], 3)
        for i in range(1, cfg.levels + 1):
            in_c = enc[i - 1] if i == cfg.levels else dec[i] + enc[i - 1]
            self._conv_layer(f"decoder.l{i}.conv1", in_c, dec[i - 1], 3)
            self._conv_layer(f"decoder.l{i}.conv2", dec[i - 1], dec[i - 1], 3)
            if in_c != dec[i - 1]:
                self._conv_layer(f"decoder.l{i}.skip", in_c, dec[i - 1], 1)
        for i in range(1, cfg.levels + 1):
            self._conv_layer(f"head.l{i}.u", dec[i - 1], cfg.head_channels, 3)
            self._conv_layer(f"head.l{i}.p", cfg.head_channels, 1, 3)
        if cfg.hgam_enabled:
            for i in range(1, cfg.levels + 1):
                m = cfg.msg_channels
                self._conv_layer(f"hgam.l{i}.h1", cfg.head_channels, m, 3)
                self._conv_layer(f"hgam.l{i}.h2", cfg.head_channels, m, 3)
                self._conv_layer(f"hgam.l{i}.h3", enc[i - 1], m, 1)
                h4_in = enc[i - 1] if i == cfg.levels else m
                self._conv_layer(f"hgam.l{i}.h4", h4_in, m, 1)
                self._conv_layer(f"hgam.l{i}.fuse", 4 * m, m, 1)
            self._conv_layer("final.u", dec[0], cfg.head_channels, 3)
            self._conv_layer("final.p", cfg.head_channels, 1, 3)

    def _hgam_level_params(self, i: int) -> attn.HgamLevelParams:
        return attn.HgamLevelParams(
            h1=self._layers[f"hgam.l{i}.h1"],
            h2=self._layers[f"hgam.l{i}.h2"],
            h3=self._layers[f"hgam.l{i}.h3"],
            h4=self._layers[f"hgam.l{i}.h4"],
            fuse=self._layers[f"hgam.l{i}.fuse"],
        )

    # -- forward pieces ------------------------------------------------------

    def encode(self, img: Tensor) -> list:
        """Per-level features, two conv+relu each, max-pooled between levels."""
        cfg = self.cfg
        s = cfg.input_size
        if img.ndim != 4 or img.shape[1] != 3 or img.shape[2] != s or img.shape[3] != s:
            raise ShapeMismatchError(
                f"expected input N x 3 x {s} x {s}, got shape {tuple(img.shape)}"
            )
        feats = []
        x = img
        for i in range(1, cfg.levels + 1):
            if i > 1:
                g = cfg.grid(i)
                x = maxpool2d(x, g, g)
            x = relu(conv2d(x, self._layers[f"encoder.l{i}.conv1"]))
            x = relu(conv2d(x, self._layers[f"encoder.l{i}.conv2"]))
            feats.append(x)
        return feats

    def _residual_block(self, name: str, x: Tensor) -> Tensor:
        h = relu(conv2d(x, self._layers[f"{name}.conv1"]))
        h = conv2d(h, self._layers[f"{name}.conv2"])
        skip = self._layers.get(f"{name}.skip")
        s = conv2d(x, skip) if skip is not None else x
        return relu(h + s)

    def decode(self, encoded: list) -> list:
        """Top-down residual refinement; finest level first in the result."""
        cfg = self.cfg
        res: list = [None] * cfg.levels
        for i in range(cfg.levels, 0, -1):
            if i == cfg.levels:
                x = encoded[i - 1]
            else:
                g = cfg.grid(i)
                up = upsample_bilinear(res[i], g, g)
                x = concat_channels([up, encoded[i - 1]])
            res[i - 1] = self._residual_block(f"decoder.l{i}", x)
        return res

    def _to_full(self, t: Tensor) -> Tensor:
        s = self.cfg.input_size
        if t.shape[2] == s and t.shape[3] == s:
            return t
        return upsample_bilinear(t, s, s)

    def heads(self, residual: list):
        """Full-resolution features and sigmoid prediction maps per level."""
        ups, preds = [], []
        for i in range(1, self.cfg.levels + 1):
            u = relu(conv2d(self._to_full(residual[i - 1]), self._layers[f"head.l{i}.u"]))
            p = sigmoid(conv2d(u, self._layers[f"head.l{i}.p"]))
            ups.append(u)
            preds.append(p)
        # prediction sets are ordered deepest first
        return ups, PredictionSet(hierarchical=list(reversed(preds)))

    def forward(self, img: Tensor) -> NetworkActivations:
        cfg = self.cfg
        encoded = self.encode(img)
        residual = self.decode(encoded)
        ups, preds = self.heads(residual)
        acts = NetworkActivations(
            encoded=encoded, residual=residual, upsampled=ups, predictions=preds
        )
        if not cfg.hgam_enabled:
            return acts
        states: list = [None] * cfg.levels
        prev = None
        for i in range(cfg.levels, 0, -1):
            state = attn.hgam_step(
                encoded[i - 1],
                ups[i - 1],
                prev,
                i,
                cfg.levels,
                self._hgam_level_params(i),
                cfg.attention,
            )
            states[i - 1] = state
            prev = state.message
        guided = [
            attn.guide(residual[i], states[i].attention) for i in range(cfg.levels)
        ]
        u = relu(conv2d(self._to_full(guided[0]), self._layers["final.u"]))
        preds.final = sigmoid(conv2d(u, self._layers["final.p"]))
        acts.guided = guided
        acts.attention_states = states
        return acts

    # -- inference and parameter plumbing -------------------------------------

    def infer(self, images: np.ndarray) -> np.ndarray:
        """Saliency maps (N, H, W) for a float image batch (N, 3, H, W)."""
        out = self.forward(Tensor(np.asarray(images, dtype=self.cfg.dtype)))
        return out.predictions.inference_output.data[:, 0]

    def attention_maps(self, images: np.ndarray) -> list:
        """Per-level attention planes (N, H_i, W_i), finest level first."""
        if not self.cfg.hgam_enabled:
            raise ValueError("model was built without the attention chain")
        acts = self.forward(Tensor(np.asarray(images, dtype=self.cfg.dtype)))
        return [s.attention.data[:, 0] for s in acts.attention_states]

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def encoder_param_names(self) -> set:
        return {n for n in self.params if n.startswith("encoder.")}

    def state_arrays(self) -> dict:
        return {name: t.data for name, t in self.params.items()}

    def load_state(self, arrays: dict) -> None:
        missing = sorted(set(self.params) - set(arrays))
        extra = sorted(set(arrays) - set(self.params))
        if missing or extra:
            raise CheckpointError(
                f"parameter names do not match model (missing {missing[:3]}, extra {extra[:3]})"
            )
        for name, arr in arrays.items():
            t = self.params[name]
            if tuple(arr.shape) != tuple(t.shape):
                raise CheckpointError(
                    f"shape of {name} is {tuple(arr.shape)}, expected {tuple(t.shape)}"
                )
            t.data = np.asarray(arr, dtype=self.cfg.dtype)


def save_checkpoint(path, arrays: dict) -> None:
    """Write named float arrays: magic, version, then length-prefixed records.

    Values are stored as raw little-endian float32.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint written by save_checkpoint; rejects unknown versions."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes; not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n_items = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(4 * n_items), dtype="<f4")
        arrays[name] = data.reshape(dims).copy()
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last record")
    return arrays
