"""Image patchification and token embedding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .module import Module, parameter, trunc_normal
from .tensor import Tensor, as_tensor, matmul


@dataclass
class PatchSequence:
    """Flattened patches, ``(..., N, P*P*C)``, in row-major grid order."""
    tokens: Tensor
    grid_rows: int
    grid_cols: int

    @property
    def num_tokens(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass
class TokenSequence:
    tokens: Tensor
    grid_rows: int
    grid_cols: int

    @property
    def num_tokens(self) -> int:
        return self.grid_rows * self.grid_cols


def patchify(image, patch: int) -> PatchSequence:
    """Split ``(..., H, W, C)`` images into non-overlapping ``patch x patch`` tiles.

    Patch ``(r, c)`` becomes token ``r * grid_cols + c``; each token is the
    row-major flattening of its ``(patch, patch, C)`` block.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim < 3:
        raise ValueError(f"patchify: expected (..., H, W, C) image, got shape {arr.shape}")
    h, w, c = arr.shape[-3:]
    if patch < 1 or h % patch or w % patch:
        raise ValueError(f"patchify: image {h}x{w} is not divisible by patch size {patch}")
    rows, cols = h // patch, w // patch
    lead = arr.shape[:-3]
    t = arr.reshape(*lead, rows, patch, cols, patch, c)
    k = len(lead)
    t = t.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    tokens = np.ascontiguousarray(t.reshape(*lead, rows * cols, patch * patch * c))
    dtype = arr.dtype if arr.dtype.kind == "f" else np.float64
    return PatchSequence(Tensor(tokens, dtype=dtype), rows, cols)


def unpatchify(patches: PatchSequence, patch: int, channels: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    arr = patches.tokens.data
    rows, cols = patches.grid_rows, patches.grid_cols
    lead = arr.shape[:-2]
    k = len(lead)
    t = arr.reshape(*lead, rows, cols, patch, patch, channels)
    t = t.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return t.reshape(*lead, rows * patch, cols * patch, channels)


def embed(patches: PatchSequence, projection: Tensor, pos: Tensor) -> TokenSequence:
    """``tokens = patches @ projection + pos``."""
    n = patches.num_tokens
    if pos.ndim != 2 or pos.shape[0] != n:
        raise ValueError(f"embed: positional table {pos.shape} does not cover a "
                         f"{patches.grid_rows}x{patches.grid_cols} grid ({n} tokens)")
    if projection.ndim != 2 or projection.shape[0] != patches.tokens.shape[-1] \
            or projection.shape[1] != pos.shape[1]:
        raise ValueError(f"embed: projection {projection.shape} does not map patches "
                         f"{patches.tokens.shape} to width {pos.shape[1]}")
    tokens = matmul(patches.tokens, projection) + pos
    return TokenSequence(tokens, patches.grid_rows, patches.grid_cols)


class PatchEmbed(Module):
    def __init__(self, image_size: tuple[int, int], channels: int, patch: int, dim: int,
                 rng: np.random.Generator, dtype=np.float64):
        h, w = image_size
        if h % patch or w % patch:
            raise ValueError(f"PatchEmbed: image {h}x{w} is not divisible by patch size {patch}")
        self.patch = patch
        self.channels = channels
        self.grid = (h // patch, w // patch)
        self.projection = parameter(trunc_normal(rng, (patch * patch * channels, dim)), dtype)
        self.pos = parameter(trunc_normal(rng, (self.grid[0] * self.grid[1], dim)), dtype)

    def __call__(self, image) -> TokenSequence:
        image = as_tensor(image)
        patches = patchify(image, self.patch)
        if (patches.grid_rows, patches.grid_cols) != self.grid:
            raise ValueError(f"PatchEmbed: got a {patches.grid_rows}x{patches.grid_cols} grid, "
                             f"configured for {self.grid[0]}x{self.grid[1]}")
        patches.tokens = Tensor(patches.tokens.data, dtype=self.pos.dtype)
        return embed(patches, self.projection, self.pos)
