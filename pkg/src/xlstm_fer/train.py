"""Training loop, AdamW, evaluation and confusion matrices."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .model import ModelConfig, XLSTMFER, cross_entropy, preset

logger = logging.getLogger(__name__)

METRICS_FIELDS = ("epoch", "train_loss", "train_acc", "eval_acc", "seconds")


class TrainingError(RuntimeError):
    pass


class NonFiniteLoss(TrainingError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=lambda: preset("desk-tiny"))
    lr: float = 1e-3
    weight_decay: float = 0.01
    min_lr: float = 1e-5
    schedule: str = "cosine"
    batch_size: int = 16
    epochs: int = 200
    seed: int = 0
    out_dir: str = "runs/xlstm-fer"
    stop_at_train_acc: float | None = None
    keep_checkpoints: bool = False
    # data
    train_data: str = "synthetic"
    eval_data: str | None = "synthetic"
    label_map: str | None = None
    normalization: str = "none"
    synth_per_class: int = 32
    synth_seed: int = 7
    synth_eval_seed: int = 1007
    synth_eval_per_class: int = 32
    synth_noise: float = 0.15


# -- optimizer -------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay applied to matrices (``ndim >= 2``) only."""

    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and p.ndim >= 2:
                p.data *= p.dtype.type(1.0 - lr * self.weight_decay)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], step: int) -> None:
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"])
            self.v[k] = np.array(state[f"v.{k}"])
        self.t = step


def cosine_lr(step: int, total: int, lr: float, min_lr: float) -> float:
    if total <= 1:
        return lr
    frac = min(step / (total - 1), 1.0)
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * frac))


# -- evaluation --------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""
    counts: np.ndarray
    class_names: list[str]

    @classmethod
    def from_predictions(cls, y_true, y_pred, class_names) -> "ConfusionMatrix":
        k = len(class_names)
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true, dtype=np.intp), np.asarray(y_pred, dtype=np.intp)), 1)
        return cls(counts, list(class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def per_class_accuracy(self) -> np.ndarray:
        support = self.counts.sum(axis=1)
        return np.divide(np.diag(self.counts), support, out=np.zeros(len(support)), where=support > 0)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.class_names)
            w.writerows(self.counts.tolist())
        return path

    @classmethod
    def from_csv(cls, path) -> "ConfusionMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls(np.array([[int(v) for v in r] for r in rows[1:]], dtype=np.int64), rows[0])

    def to_svg(self, path, cell: int = 48) -> Path:
        """Heatmap of row-normalized counts, annotated with the raw counts."""
        k = len(self.class_names)
        margin = 110
        size = margin + k * cell + 10
        rows = self.counts.sum(axis=1, keepdims=True)
        frac = np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
                 f'font-family="sans-serif" font-size="11">']
        for i in range(k):
            y = margin + i * cell
            parts.append(f'<text x="{margin - 6}" y="{y + cell / 2 + 4}" text-anchor="end">'
                         f'{self.class_names[i]}</text>')
            parts.append(f'<text x="{margin + i * cell + cell / 2}" y="{margin - 6}" text-anchor="start" '
                         f'transform="rotate(-45 {margin + i * cell + cell / 2} {margin - 6})">'
                         f'{self.class_names[i]}</text>')
            for j in range(k):
                shade = int(round(255 * (1 - frac[i, j])))
                fg = "white" if frac[i, j] > 0.5 else "black"
                x = margin + j * cell
                parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                             f'fill="rgb({shade},{shade},255)" stroke="#999"/>')
                parts.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" '
                             f'fill="{fg}">{self.counts[i, j]}</text>')
        parts.append("</svg>")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(parts))
        return path


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    confusion: ConfusionMatrix


def evaluate(model: XLSTMFER, images, labels, class_names=None, batch_size: int = 64) -> EvalResult:
    """Deterministic pass over a dataset: mean cross-entropy, Top-1 accuracy, confusion matrix."""
    k = model.config.num_classes
    labels = np.asarray(labels, dtype=np.intp)
    if class_names is None:
        class_names = [str(i) for i in range(k)]
    if len(class_names) != k:
        raise ValueError(f"dataset has {len(class_names)} classes, model predicts {k}")
    if labels.size and labels.max() >= k:
        raise ValueError(f"label {labels.max()} out of range for a {k}-class model")
    images = np.asarray(images, dtype=model.config.dtype)
    total_loss, preds = 0.0, []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            logits = model(images[i:i + batch_size])
            total_loss += cross_entropy(logits, labels[i:i + batch_size]).item() * len(logits.data)
            preds.append(np.argmax(logits.data, axis=-1))
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.intp)
    cm = ConfusionMatrix.from_predictions(labels, pred, class_names)
    return EvalResult(total_loss / max(len(labels), 1), cm.accuracy, cm)


# -- training ----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: XLSTMFER
    metrics: list[dict]
    final_checkpoint: Path
    out_dir: Path


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in METRICS_FIELDS})


def train(cfg: TrainConfig, train_set, eval_set=None, class_names=None, out_dir=None,
          progress=None) -> TrainResult:
    """Minimize mean cross-entropy with AdamW and a cosine schedule.

    ``train_set`` and ``eval_set`` are ``(images, labels)`` pairs. Writes
    ``metrics.csv``, a rolling ``latest.ckpt`` each epoch and ``final.ckpt``
    into ``out_dir``. Row 0 of the metrics is the model at initialization.
    """
    mcfg = cfg.model
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, labels = train_set
    images = np.asarray(images, dtype=mcfg.dtype)
    labels = np.asarray(labels, dtype=np.intp)
    if class_names is not None and len(class_names) != mcfg.num_classes:
        raise TrainingError(f"dataset has {len(class_names)} classes, model is configured "
                            f"for {mcfg.num_classes}")
    if labels.max() >= mcfg.num_classes:
        raise TrainingError(f"label {labels.max()} out of range for {mcfg.num_classes} classes")
    if eval_set is not None:
        eval_set = (np.asarray(eval_set[0], dtype=mcfg.dtype), np.asarray(eval_set[1], dtype=np.intp))

    model = XLSTMFER(mcfg, seed=cfg.seed)
    named = list(model.named_parameters())
    opt = AdamW(named, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n = len(labels)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    metrics: list[dict] = []
    metrics_path = out / "metrics.csv"

    def record(epoch: int, started: float) -> dict:
        tr = evaluate(model, images, labels, class_names)
        ev = evaluate(model, *eval_set, class_names).accuracy if eval_set is not None else float("nan")
        row = {"epoch": epoch, "train_loss": tr.loss, "train_acc": tr.accuracy, "eval_acc": ev,
               "seconds": time.perf_counter() - started}
        metrics.append(row)
        _write_metrics(metrics_path, metrics)
        if progress:
            progress(row)
        return row

    def snapshot(epoch: int) -> ckpt_io.Checkpoint:
        meta = {"epoch": epoch, "seed": cfg.seed, "step": opt.t, "optimizer": "adamw",
                "lr": cfg.lr, "weight_decay": cfg.weight_decay,
                "class_names": list(class_names) if class_names is not None else None}
        return ckpt_io.from_model(model, meta, opt.state_dict())

    t0 = time.perf_counter()
    record(0, t0)
    ckpt_io.save(out / "latest.ckpt", snapshot(0))
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            opt.zero_grad()
            loss = cross_entropy(model(images[idx]), labels[idx])
            if not np.isfinite(loss.item()):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, step {step}; "
                                    f"last good checkpoint: {out / 'latest.ckpt'}")
            T.backward(loss)
            lr = cosine_lr(step, total_steps, cfg.lr, cfg.min_lr) if cfg.schedule == "cosine" else cfg.lr
            opt.step(lr)
            step += 1
        row = record(epoch, t0)
        snap = snapshot(epoch)
        ckpt_io.save(out / "latest.ckpt", snap)
        if cfg.keep_checkpoints:
            ckpt_io.save(out / f"epoch_{epoch:04d}.ckpt", snap)
        if cfg.stop_at_train_acc is not None and row["train_acc"] >= cfg.stop_at_train_acc:
            logger.info("train accuracy %.4f reached at epoch %d; stopping", row["train_acc"], epoch)
            break
    final = ckpt_io.save(out / "final.ckpt", snapshot(metrics[-1]["epoch"]))
    return TrainResult(model, metrics, final, out)
