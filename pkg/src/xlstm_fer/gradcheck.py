"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradEntry:
    name: str
    analytic_norm: float
    numeric_norm: float
    max_rel_error: float
    checked: int


@dataclass
class GradReport:
    entries: list[GradEntry] = field(default_factory=list)
    deterministic: bool = True
    eps: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.deterministic and bool(self.entries) and self.max_rel_error < tol

    def format(self) -> str:
        lines = [f"{'parameter':<40} {'|analytic|':>12} {'|numeric|':>12} {'rel.err':>10} {'n':>6}"]
        for e in self.entries:
            lines.append(f"{e.name:<40} {e.analytic_norm:12.4e} {e.numeric_norm:12.4e} "
                         f"{e.max_rel_error:10.2e} {e.checked:6d}")
        if not self.deterministic:
            lines.append("FAILED: closure is not deterministic")
        lines.append(f"max relative error: {self.max_rel_error:.3e}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|, 1e-12)`` over one parameter group."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def grad_check(closure: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> GradReport:
    """Compare analytic gradients of ``closure()`` with central differences.

    ``closure`` must return a scalar :class:`Tensor` and be deterministic. With
    ``max_entries`` set, each parameter group is probed at that many randomly
    chosen coordinates instead of every coordinate.
    """
    if not eps > 0:
        raise ValueError(f"grad_check: eps must be positive, got {eps}")
    report = GradReport(eps=eps)
    for p in params.values():
        p.zero_grad()
    loss = closure()
    if loss.size != 1:
        raise ValueError(f"grad_check: closure must return a scalar, got shape {loss.shape}")
    backward(loss)
    with no_grad():
        again = closure()
    if not np.array_equal(loss.data, again.data):
        report.deterministic = False

    rng = np.random.default_rng(seed)
    for name, p in params.items():
        analytic_full = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(coords.size)
        with no_grad():
            for j, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + eps
                fp = closure().item()
                flat[c] = orig - eps
                fm = closure().item()
                flat[c] = orig
                numeric[j] = (fp - fm) / (2 * eps)
        analytic = analytic_full.reshape(-1)[coords]
        report.entries.append(GradEntry(
            name=name,
            analytic_norm=float(np.linalg.norm(analytic)),
            numeric_norm=float(np.linalg.norm(numeric)),
            max_rel_error=relative_error(analytic, numeric),
            checked=int(coords.size),
        ))
    return report


def check_model_gradients(preset_name: str = "desk-tiny", eps: float = 1e-5, max_entries: int | None = 8,
                          batch: int = 2, seed: int = 0, perturb: float = 0.1, **overrides) -> GradReport:
    """Gradient check of the cross-entropy loss of a preset model at float64.

    Every parameter gets Gaussian noise of std ``perturb`` and the classifier
    is redrawn, so the check runs at a generic point: at initialization the
    classifier is zero and the gate weights' gradients sit near the
    finite-difference noise floor.
    """
    from .data import stack_samples, synth_dataset
    from .model import XLSTMFER, cross_entropy, preset

    cfg = preset(preset_name, precision="float64", **overrides)
    model = XLSTMFER(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for p in model.parameters():
        p.data = p.data + rng.normal(0.0, perturb, size=p.shape)
    model.head_weight.data = rng.normal(0.0, 0.5, size=model.head_weight.shape)
    model.head_bias.data = rng.normal(0.0, 0.1, size=model.head_bias.shape)
    per_class = -(-batch // cfg.num_classes)
    images, labels = stack_samples(synth_dataset(cfg.num_classes, per_class, cfg.image_size,
                                                 cfg.channels, seed=seed))
    images, labels = images[:batch], labels[:batch]
    return grad_check(lambda: cross_entropy(model(images), labels), dict(model.named_parameters()),
                      eps=eps, max_entries=max_entries, seed=seed)
