"""Scan orders over the patch grid and the weighted merge of per-direction outputs."""
from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from . import tensor as T
from .module import Module, parameter
from .tensor import Tensor, as_tensor


class ScanDirection(enum.Enum):
    ROW_FORWARD = "row_forward"
    ROW_BACKWARD = "row_backward"
    COL_FORWARD = "col_forward"
    COL_BACKWARD = "col_backward"


ALL_DIRECTIONS = tuple(ScanDirection)


def scan_order(rows: int, cols: int, direction: ScanDirection) -> np.ndarray:
    """Token visit order for a ``rows x cols`` grid whose tokens are stored row-major.

    Element ``j`` of the result is the token index processed at sequence step ``j``.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"scan_order: grid must be at least 1x1, got {rows}x{cols}")
    direction = ScanDirection(direction)
    grid = np.arange(rows * cols).reshape(rows, cols)
    if direction in (ScanDirection.ROW_FORWARD, ScanDirection.ROW_BACKWARD):
        order = grid.reshape(-1)
    else:
        order = grid.T.reshape(-1)
    if direction in (ScanDirection.ROW_BACKWARD, ScanDirection.COL_BACKWARD):
        order = order[::-1]
    return np.ascontiguousarray(order)


def inverse_permutation(order) -> np.ndarray:
    order = np.asarray(order, dtype=np.intp)
    if order.ndim != 1 or not np.array_equal(np.sort(order), np.arange(order.size)):
        raise ValueError(f"not a permutation of 0..{order.size - 1}: {order.tolist()}")
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    return inv


def merge_weights(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def merge_paths(outputs: Sequence, logits) -> Tensor:
    """Softmax(logits)-weighted sum of per-direction outputs (all in original token order)."""
    outputs = [as_tensor(o) for o in outputs]
    logits = as_tensor(logits)
    if logits.shape != (len(outputs),):
        raise ValueError(f"merge_paths: {len(outputs)} outputs but logits of shape {logits.shape}")
    ref = outputs[0].shape
    for o in outputs[1:]:
        if o.shape != ref:
            raise ValueError(f"merge_paths: output shapes {ref} and {o.shape} differ")
    w = T.softmax(logits)
    total = None
    for j, o in enumerate(outputs):
        term = o * w[j]
        total = term if total is None else total + term
    return total


class PathMerge(Module):
    def __init__(self, num_paths: int = 4, dtype=np.float64):
        self.logits = parameter(np.zeros(num_paths), dtype)

    def __call__(self, outputs: Sequence) -> Tensor:
        return merge_paths(outputs, self.logits)
