"""Adam optimization, the training loop with best-epoch selection,
evaluation metrics and the multi-vs-single comparison report."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .blocks import model_forward
from .checkpoint import VERSION, Checkpoint, canonical_json
from .dataset import DatasetManifest, load_batch
from .errors import DataInvalidError, InvalidArgumentError, NumericFailure
from .kernels import single_thread_blas
from .prng import SplitMix64


@dataclass
class TrainConfig:
    profile: str = "desk"
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    image_size: int = 64
    seed: int = 0
    backbone: str = "mobilenet_lite"
    arch: str = "multi"
    precision: str = "f32"
    hidden: int = 128
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.image_size < 1:
            raise InvalidArgumentError("hyperparameters must be positive")
        if self.precision not in ("f32", "f64"):
            raise InvalidArgumentError(f"precision must be f32|f64, got {self.precision!r}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """64x64 images, lr 1e-3, 30 epochs: CPU-trainable from scratch in minutes."""
        return cls(**{"profile": "desk", **overrides})

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """224x224 images, lr 1e-5, batch 16, up to 60 epochs."""
        base = {"profile": "paper", "lr": 1e-5, "epochs": 60, "image_size": 224}
        return cls(**{**base, **overrides})

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "image_size": self.image_size,
            "seed": self.seed,
            "backbone": self.backbone,
            "arch": self.arch,
            "precision": self.precision,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def adam_state_for(params) -> AdamState:
    return AdamState([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8) -> AdamState:
    """One Adam update, in place on the parameter tensors."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not np.all(np.isfinite(g)):
            raise NumericFailure("non-finite gradient in adam_step")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype, copy=False)
    return state


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float

    def to_dict(self) -> dict:
        return asdict(self)


def _batch_slices(n: int, batch_size: int) -> list[np.ndarray]:
    """Index chunks covering range(n); a trailing chunk of one sample is
    merged into the previous batch (batchnorm needs more than one row)."""
    edges = list(range(0, n, batch_size)) + [n]
    chunks = [np.arange(a, b) for a, b in zip(edges[:-1], edges[1:])]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def pick_best(logs: list[EpochLog]) -> EpochLog:
    """Highest validation accuracy; ties go to the earliest epoch."""
    best = logs[0]
    for log in logs[1:]:
        if log.val_acc > best.val_acc:
            best = log
    return best


def _predict_eval(model, rgb, sil, batch_size: int = 64) -> np.ndarray:
    n = rgb.data.shape[0]
    preds = np.empty(n, dtype=np.int64)
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        rb = T.Tensor(rgb.data[lo:hi])
        sb = T.Tensor(sil.data[lo:hi]) if sil is not None else None
        logits = model_forward(model, rb, sb, mode="eval")
        preds[lo:hi] = np.argmax(logits.data, axis=1)  # ties resolve to class 0
    return preds


def train(model, manifest: DatasetManifest, config: TrainConfig,
          on_epoch=None) -> tuple[Checkpoint, list[EpochLog]]:
    """Train with Adam and return (best-epoch checkpoint, per-epoch logs).

    Per epoch: seeded shuffle of the train split, forward in train mode,
    softmax cross-entropy, backward, Adam. Validation accuracy is measured in
    eval mode after each epoch; the checkpoint snapshots the epoch with the
    highest validation accuracy (earliest on ties).
    """
    needs_sil = model.arch == "multi"
    train_records = manifest.split_records("train")
    val_records = manifest.split_records("val")
    if not train_records or not val_records:
        raise DataInvalidError("manifest needs non-empty train and val splits")
    if config.batch_size > len(train_records):
        raise InvalidArgumentError("batch_size exceeds the training-set size")

    with single_thread_blas():
        rgb_tr, sil_tr, y_tr = load_batch(
            manifest, "train", range(len(train_records)), config.image_size, config.precision
        )
        rgb_va, sil_va, y_va = load_batch(
            manifest, "val", range(len(val_records)), config.image_size, config.precision
        )

        params = list(model.params.values())
        state = adam_state_for(params)
        shuffle_rng = SplitMix64(config.seed)
        logs: list[EpochLog] = []
        best_log = None
        best_state: dict[str, np.ndarray] = {}

        n = len(train_records)
        for epoch in range(1, config.epochs + 1):
            order = list(range(n))
            shuffle_rng.shuffle(order)
            order = np.asarray(order)
            loss_sum = 0.0
            hits = 0
            for chunk in _batch_slices(n, config.batch_size):
                idx = order[chunk]
                rb = T.Tensor(rgb_tr.data[idx])
                sb = T.Tensor(sil_tr.data[idx]) if needs_sil else None
                yb = y_tr[idx]
                try:
                    logits = model_forward(model, rb, sb, mode="train")
                    loss, probs = T.softmax_cross_entropy(logits, yb)
                    if not np.isfinite(loss.data):
                        raise NumericFailure("non-finite training loss")
                    T.backward(loss)
                    grads = [p.grad_or_zeros() for p in params]
                    adam_step(params, grads, state, config.lr, config.betas, config.eps)
                except NumericFailure as exc:
                    raise NumericFailure(f"epoch {epoch}: {exc}") from exc
                for p in params:
                    p.zero_grad()
                loss_sum += loss.item() * len(idx)
                hits += int((np.argmax(probs.data, axis=1) == yb).sum())

            preds = _predict_eval(model, rgb_va, sil_va if needs_sil else None)
            val_acc = float((preds == y_va).mean())
            log = EpochLog(epoch, loss_sum / n, hits / n, val_acc)
            logs.append(log)
            if on_epoch is not None:
                on_epoch(log)
            if best_log is None or val_acc > best_log.val_acc:
                best_log = log
                best_state = {k: a.copy() for k, a in model.state_tensors().items()}

    metadata = {
        "epoch": best_log.epoch,
        "val_accuracy": best_log.val_acc,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
    }
    return Checkpoint(VERSION, best_state, metadata), logs


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(cm: np.ndarray) -> Metrics:
    """Accuracy plus macro-averaged precision/recall/F1 over the two classes.

    Rows are true classes, columns predictions. A ratio with a zero
    denominator (class absent from truth or predictions) contributes 0.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if cm.shape != (2, 2):
        raise InvalidArgumentError(f"expected a 2x2 confusion matrix, got {cm.shape}")
    total = int(cm.sum())
    if total == 0:
        raise DataInvalidError("confusion matrix is empty")
    accuracy = float(np.trace(cm)) / total
    precisions, recalls, f1s = [], [], []
    for k in range(2):
        col = cm[:, k].sum()
        row = cm[k, :].sum()
        p = float(cm[k, k]) / col if col > 0 else 0.0
        r = float(cm[k, k]) / row if row > 0 else 0.0
        f = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(f)
    return Metrics(accuracy, float(np.mean(precisions)), float(np.mean(recalls)), float(np.mean(f1s)))


def evaluate(model, manifest: DatasetManifest, split: str,
             batch_size: int = 64) -> tuple[np.ndarray, Metrics]:
    """Confusion matrix and metrics for one split (eval mode, argmax ties to
    class 0)."""
    records = manifest.split_records(split)
    if not records:
        raise DataInvalidError(f"split {split!r} is empty")
    needs_sil = model.arch == "multi"
    with single_thread_blas():
        rgb, sil, labels = load_batch(
            manifest, split, range(len(records)), model.image_hw,
            "f32" if model.dtype == np.float32 else "f64",
        )
        preds = _predict_eval(model, rgb, sil if needs_sil else None, batch_size)
    cm = np.zeros((2, 2), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm, compute_metrics(cm)


def compare_report(results: list[dict], tolerance: float = 0.0) -> dict:
    """Merge evaluation rows into a ranked comparison.

    Each row needs arch, backbone and the four metric fields. Rows sharing
    (arch, backbone) — e.g. different seeds — are averaged for the multi-vs-
    single pairing; the flag asks that every multi-input mean accuracy be at
    least its single-input counterpart minus ``tolerance``.
    """
    if len(results) < 2:
        raise InvalidArgumentError("compare_report needs at least two result rows")
    rows = []
    for r in results:
        try:
            rows.append(
                {
                    "arch": r["arch"],
                    "backbone": r["backbone"],
                    "accuracy": float(r["accuracy"]),
                    "precision": float(r["precision"]),
                    "recall": float(r["recall"]),
                    "f1": float(r["f1"]),
                }
            )
        except KeyError as exc:
            raise InvalidArgumentError(f"result row lacks key {exc}") from exc
    rows.sort(key=lambda r: (-r["accuracy"], r["arch"], r["backbone"]))

    means: dict[tuple[str, str], float] = {}
    for key in {(r["arch"], r["backbone"]) for r in rows}:
        accs = [r["accuracy"] for r in rows if (r["arch"], r["backbone"]) == key]
        means[key] = float(np.mean(accs))
    pairs = []
    for backbone in sorted({r["backbone"] for r in rows}):
        multi = means.get(("multi", backbone))
        single = means.get(("single", backbone))
        if multi is None or single is None:
            continue
        pairs.append(
            {
                "backbone": backbone,
                "multi_accuracy": multi,
                "single_accuracy": single,
                "satisfied": bool(multi >= single - tolerance),
            }
        )
    return {
        "rows": rows,
        "pairs": pairs,
        "tolerance": tolerance,
        "multi_ge_single": bool(all(p["satisfied"] for p in pairs)) if pairs else None,
    }


def render_comparison(report: dict) -> str:
    lines = [f"{'arch':<8} {'backbone':<16} {'accuracy':>9} {'precision':>10} {'recall':>7} {'f1':>7}"]
    for r in report["rows"]:
        lines.append(
            f"{r['arch']:<8} {r['backbone']:<16} {r['accuracy']:>9.4f} "
            f"{r['precision']:>10.4f} {r['recall']:>7.4f} {r['f1']:>7.4f}"
        )
    for p in report["pairs"]:
        verdict = "ok" if p["satisfied"] else "VIOLATED"
        lines.append(
            f"multi vs single ({p['backbone']}): {p['multi_accuracy']:.4f} vs "
            f"{p['single_accuracy']:.4f} (tolerance {report['tolerance']}) -> {verdict}"
        )
    if report["multi_ge_single"] is not None:
        lines.append(f"multi >= single for every backbone: {report['multi_ge_single']}")
    return "\n".join(lines)
