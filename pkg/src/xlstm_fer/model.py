"""Full classifier: patch embedding, stacked xLSTM blocks, first/last token pooling, linear head."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .block import MLSTM_FORMS, XLSTMBlock
from .mlstm import GateConfig
from .module import Module, parameter
from .patch import PatchEmbed
from .paths import ALL_DIRECTIONS, PathMerge, ScanDirection, inverse_permutation, scan_order
from .tensor import Tensor, as_tensor

PATH_MODES = ("block", "encoder", "alternate", "single")
PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int] = (32, 32)
    channels: int = 1
    patch: int = 4
    embed_dim: int = 32
    depth: int = 2
    expansion: int = 2
    heads: int = 4
    forget_variant: str = "sigmoid"
    stabilized: bool = True
    path_merge: str = "block"
    share_paths: bool = True
    num_classes: int = 3
    precision: str = "float32"
    conv_kernel: int = 3
    forget_bias: float = 1.0
    mlstm_form: str = "parallel"

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        h, w = self.image_size
        problems = []
        if h % self.patch or w % self.patch:
            problems.append(f"image {h}x{w} not divisible by patch {self.patch}")
        if self.inner_dim % self.heads:
            problems.append(f"inner dim {self.inner_dim} not divisible by {self.heads} heads")
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.depth < 1 or self.channels < 1 or self.embed_dim < 1:
            problems.append("depth, channels and embed_dim must be positive")
        if self.path_merge not in PATH_MODES:
            problems.append(f"path_merge must be one of {PATH_MODES}")
        if self.precision not in PRECISIONS:
            problems.append(f"precision must be one of {tuple(PRECISIONS)}")
        if self.mlstm_form not in MLSTM_FORMS:
            problems.append(f"mlstm_form must be one of {MLSTM_FORMS}")
        GateConfig(self.forget_variant, self.stabilized)
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    @property
    def inner_dim(self) -> int:
        return self.expansion * self.embed_dim

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch, self.image_size[1] // self.patch

    @property
    def num_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def gate_config(self) -> GateConfig:
        return GateConfig(self.forget_variant, self.stabilized)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    # 224x224 RGB, 16x16 patches, 26 blocks, width 384 (q/k/v width 768), 192 heads
    "paper-xlstm-fer": ModelConfig(image_size=(224, 224), channels=3, patch=16, embed_dim=384,
                                   depth=26, heads=192, num_classes=7),
    "desk-tiny": ModelConfig(image_size=(32, 32), channels=1, patch=4, embed_dim=32, depth=2,
                             heads=4, num_classes=3),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg


def aggregate(tokens) -> Tensor:
    """Mean of the first and last token: ``(..., N, D) -> (..., D)``."""
    tokens = as_tensor(tokens)
    if tokens.ndim < 2 or tokens.shape[-2] < 1:
        raise ValueError(f"aggregate: expected a non-empty (..., N, D) sequence, got {tokens.shape}")
    n = tokens.shape[-2]
    return T.scale(tokens[..., 0, :] + tokens[..., n - 1, :], 0.5)


def cross_entropy(logits, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch."""
    logits = as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    k = logits.shape[-1]
    if labels.shape[0] != logits.shape[0]:
        raise ValueError(f"cross_entropy: {labels.shape[0]} labels for {logits.shape[0]} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k}), got {labels.tolist()}")
    logp = T.log_softmax(logits)
    picked = logp[np.arange(labels.size), labels]
    return T.scale(T.reduce_sum(picked), -1.0 / labels.size)


def probability_cross_entropy(probs, label: int) -> float:
    """``-log(probs[label])`` for an explicit probability vector."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(probs[label]))


class XLSTMFER(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        dtype = config.dtype
        self.embed = PatchEmbed(config.image_size, config.channels, config.patch, config.embed_dim, rng, dtype)
        per_block_paths = 4 if config.path_merge == "block" else 1
        self.blocks = [
            XLSTMBlock(config.embed_dim, config.inner_dim, config.heads, rng, dtype,
                       gate_cfg=config.gate_config, num_paths=per_block_paths,
                       share_paths=config.share_paths, kernel_size=config.conv_kernel,
                       forget_bias=config.forget_bias)
            for _ in range(config.depth)
        ]
        self.encoder_merge = PathMerge(4, dtype) if config.path_merge == "encoder" else None
        self.norm_weight = parameter(np.ones(config.embed_dim), dtype)
        self.norm_bias = parameter(np.zeros(config.embed_dim), dtype)
        self.head_weight = parameter(np.zeros((config.embed_dim, config.num_classes)), dtype)
        self.head_bias = parameter(np.zeros(config.num_classes), dtype)
        rows, cols = config.grid
        self.orders = {d: scan_order(rows, cols, d) for d in ALL_DIRECTIONS}

    def _block_orders(self, index: int) -> list[np.ndarray]:
        mode = self.config.path_merge
        if mode == "block":
            return [self.orders[d] for d in ALL_DIRECTIONS]
        if mode == "alternate":
            return [self.orders[ALL_DIRECTIONS[index % 4]]]
        return [self.orders[ScanDirection.ROW_FORWARD]]

    def encode(self, images, form: str | None = None) -> Tensor:
        """Images ``(B, H, W, C)`` (or a single ``(H, W, C)``) to encoded tokens ``(B, N, D)``."""
        form = form or self.config.mlstm_form
        images = as_tensor(images)
        if images.ndim == 3:
            images = images.reshape(1, *images.shape)
        h, w = self.config.image_size
        if images.ndim != 4 or images.shape[1:] != (h, w, self.config.channels):
            raise ValueError(f"expected images of shape (B, {h}, {w}, {self.config.channels}), "
                             f"got {images.shape}")
        x = self.embed(images).tokens
        if self.config.path_merge == "encoder":
            outs = []
            for d in ALL_DIRECTIONS:
                order = self.orders[d]
                inv = inverse_permutation(order)
                z = T.take(x, order, axis=-2)
                ident = np.arange(len(order))
                for block in self.blocks:
                    z = block(z, [ident], form)
                outs.append(T.take(z, inv, axis=-2))
            x = self.encoder_merge(outs)
        else:
            for i, block in enumerate(self.blocks):
                x = block(x, self._block_orders(i), form)
        return T.layer_norm(x, self.norm_weight, self.norm_bias)

    def logits(self, images, form: str | None = None) -> Tensor:
        return aggregate(self.encode(images, form)) @ self.head_weight + self.head_bias

    __call__ = logits

    def predict_proba(self, images, form: str | None = None) -> np.ndarray:
        with T.no_grad():
            return T.softmax(self.logits(images, form)).data

    def predict(self, images, batch_size: int = 64, form: str | None = None) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        preds = [np.argmax(self.predict_proba(images[i:i + batch_size], form), axis=-1)
                 for i in range(0, len(images), batch_size)]
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.intp)


def model_forward(model: XLSTMFER, image) -> np.ndarray:
    """Class probabilities for a single ``(H, W, C)`` image."""
    return model.predict_proba(image)[0]
