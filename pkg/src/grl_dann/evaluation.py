"""Confusion matrices, accuracies, feature projection and report export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CLASS_NAMES, Dataset
from .errors import CollinearityError, DataError, TooFewPointsError
from .tensor_core import Tensor, make_rng


@dataclass
class ConfusionMatrix:
    """counts[pred][truth]; rows are predictions, columns ground truth."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = self.counts.shape[0]
        if self.counts.shape != (k, k) or np.any(self.counts < 0):
            raise DataError("confusion matrix must be square with nonnegative counts")

    @classmethod
    def from_predictions(cls, pred, truth, k: int = len(CLASS_NAMES)) -> "ConfusionMatrix":
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (np.asarray(pred), np.asarray(truth)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def per_class_accuracy(cm: ConfusionMatrix) -> list[float | None]:
    """diag / row sum; None for a class that was never predicted."""
    if cm.total == 0:
        raise DataError("empty confusion matrix")
    rows = cm.counts.sum(axis=1)
    return [float(cm.counts[i, i] / rows[i]) if rows[i] else None
            for i in range(len(rows))]


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise DataError("empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def evaluate(net, test: Dataset) -> ConfusionMatrix:
    """Argmax of label logits; ties go to the lowest class index."""
    if len(test) == 0:
        raise DataError("empty test set")
    truth = test.labels()
    logits = net.predict(test.images())
    return ConfusionMatrix.from_predictions(np.argmax(logits, axis=1), truth,
                                            logits.shape[1])


def extract_penultimate(net, images: Tensor, chunk: int = 64) -> Tensor:
    """Post-ReLU activations of the label head's second hidden layer."""
    hidden = net.label_predictor.layers[:4]
    out = []
    for i in range(0, len(images), chunk):
        h = net.features(images[i:i + chunk])
        for layer in hidden:
            h = layer.forward(h)
        out.append(h)
    net.clear_cache()
    return np.concatenate(out, axis=0)


def heldout_domain_loss(net, source: Dataset, target: Dataset, batch_size: int = 64) -> float:
    """Mean domain-classifier loss over balanced half/half batches.

    Each domain contributes its first min(|source|, |target|) samples, so the
    loss of a classifier that cannot tell the domains apart is ln 2.
    """
    from .model import domain_loss

    n = min(len(source), len(target))
    half = batch_size // 2
    if n == 0 or half == 0:
        raise DataError("held-out domain loss needs samples from both domains")
    xs, xt = source.images()[:n], target.images()[:n]
    total, count = 0.0, 0
    for i in range(0, n, half):
        a, b = xs[i:i + half], xt[i:i + half]
        d = np.array([0] * len(a) + [1] * len(b))
        total += domain_loss(net, np.concatenate([a, b]), d) * len(d)
        count += len(d)
    net.clear_cache()
    return total / count


# --- t-SNE -------------------------------------------------------------------


@dataclass
class ProjectedPoint:
    x: float
    y: float
    domain: str
    label: int | None


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl_initial: float
    kl_final: float
    perplexity: float
    kl_history: list[float] = field(default_factory=list)


def _sq_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_affinities(dist: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """Entropy (nats) and normalised Gaussian affinities of one row."""
    shifted = dist - dist.min()
    p = np.exp(-shifted * beta)
    s = p.sum()
    h = math.log(s) + beta * float(np.sum(shifted * p)) / s
    return h, p / s


def conditional_affinities(x: np.ndarray, perplexity: float, tol: float = 1e-5,
                           max_iter: int = 50) -> np.ndarray:
    """P(j|i) with each row's precision found by bisection on the entropy."""
    n = x.shape[0]
    d = _sq_distances(x)
    target = math.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d[i], i)
        beta = 1.0 / max(float(np.mean(di)), 1e-12)
        lo, hi = 0.0, math.inf
        h, row = _row_affinities(di, beta)
        for _ in range(max_iter):
            diff = h - target
            if abs(diff) <= tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if math.isinf(hi) else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
            h, row = _row_affinities(di, beta)
        p[i, np.arange(n) != i] = row
    return p


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * np.log(p / q)))


def tsne_embed(features: Tensor, perplexity: float = 30.0, seed: int = 0,
               n_iter: int = 1000, learning_rate: float = 200.0,
               exaggeration: float = 4.0, exaggeration_iters: int = 100,
               momentum_switch: int = 250) -> TsneResult:
    """Exact 2-D t-SNE by gradient descent with momentum and adaptive gains.

    The embedding starts as N(0, 1e-4^2) draws and is re-centred after every
    update, so its centroid stays at the origin.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < 5:
        raise TooFewPointsError(f"t-SNE needs at least 5 points, got {n}")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite feature values")
    if np.max(_sq_distances(x)) == 0.0:
        raise CollinearityError("all feature vectors coincide; affinities are degenerate")
    perplexity = min(perplexity, (n - 1) / 3.0)

    p = conditional_affinities(x, perplexity)
    p = (p + p.T) / (2.0 * n)
    np.fill_diagonal(p, 0.0)
    p = np.maximum(p, 1e-12)

    rng = make_rng(seed)
    y = rng.standard_normal((n, 2)) * 1e-4
    y -= y.mean(axis=0)
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    history = []

    def affinities(y):
        num = 1.0 / (1.0 + _sq_distances(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        return num, q

    _, q = affinities(y)
    kl_initial = _kl(p, q)
    for it in range(n_iter):
        scale = exaggeration if it < exaggeration_iters else 1.0
        num, q = affinities(y)
        w = (scale * p - q) * num
        grad = 4.0 * (np.sum(w, axis=1)[:, None] * y - w @ y)
        momentum = 0.5 if it < momentum_switch else 0.8
        same = (grad > 0) == (update > 0)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - learning_rate * gains * grad
        y += update
        y -= y.mean(axis=0)
        if it % 50 == 49:
            history.append(_kl(p, q))
    _, q = affinities(y)
    kl_final = _kl(p, q)
    if not np.all(np.isfinite(y)):
        raise DataError("t-SNE produced non-finite coordinates")
    return TsneResult(y, kl_initial, kl_final, perplexity, history)


def tsne_project(features: Tensor, perplexity: float = 30.0, seed: int = 0,
                 domains: Sequence[str] | None = None,
                 labels: Sequence[int | None] | None = None,
                 **kwargs) -> list[ProjectedPoint]:
    n = len(features)
    domains = list(domains) if domains is not None else ["source"] * n
    labels = list(labels) if labels is not None else [None] * n
    res = tsne_embed(features, perplexity, seed, **kwargs)
    return [ProjectedPoint(float(a), float(b), d, lab)
            for (a, b), d, lab in zip(res.embedding, domains, labels)]


def neighbor_mixing(xy: np.ndarray, domains: Sequence, k: int = 10) -> float:
    """Mean fraction of each point's k nearest neighbours (self excluded)
    that come from the other domain."""
    xy = np.asarray(xy, dtype=np.float64)
    dom = np.asarray(domains)
    if len(xy) <= k:
        raise TooFewPointsError(f"need more than {k} points")
    d = _sq_distances(xy)
    np.fill_diagonal(d, np.inf)
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    return float(np.mean(dom[nn] != dom[:, None]))


# --- reports -----------------------------------------------------------------

CONFUSION_HEADER = ["prediction", *CLASS_NAMES, "accuracy"]
POINTS_HEADER = ["x", "y", "domain", "label"]


def export_report(cm: ConfusionMatrix | None, points: list[ProjectedPoint] | None,
                  out_dir, prefix: str = "report") -> dict[str, Path]:
    """Write ``<prefix>_confusion.csv`` (header + one row per predicted
    class, with its accuracy), ``<prefix>_summary.json`` and
    ``<prefix>_points.csv``. Parts passed as None are skipped."""
    out_dir = Path(out_dir)
    written = {}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if cm is not None:
            path = out_dir / f"{prefix}_confusion.csv"
            accs = per_class_accuracy(cm)
            names = CLASS_NAMES if cm.counts.shape[0] == len(CLASS_NAMES) else \
                [str(i) for i in range(cm.counts.shape[0])]
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["prediction", *names, "accuracy"])
                for name, row, acc in zip(names, cm.counts, accs):
                    writer.writerow([name, *map(int, row), "" if acc is None else f"{acc:.6f}"])
            written["confusion"] = path
            path = out_dir / f"{prefix}_summary.json"
            summary = {"total": cm.total, "overall_accuracy": overall_accuracy(cm),
                       "per_class_accuracy": accs, "counts": cm.counts.tolist()}
            path.write_text(json.dumps(summary, indent=2) + "\n")
            written["summary"] = path
        if points is not None:
            path = out_dir / f"{prefix}_points.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(POINTS_HEADER)
                for pt in points:
                    writer.writerow([repr(pt.x), repr(pt.y), pt.domain,
                                     "" if pt.label is None else pt.label])
            written["points"] = path
    except OSError as exc:
        raise DataError(f"{exc.filename or out_dir}: {exc.strerror}") from exc
    return written


def read_confusion_csv(path) -> ConfusionMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return ConfusionMatrix([[int(v) for v in row[1:-1]] for row in rows[1:]])


def read_points_csv(path) -> list[ProjectedPoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [ProjectedPoint(float(r["x"]), float(r["y"]), r["domain"],
                               int(r["label"]) if r["label"] else None) for r in reader]
