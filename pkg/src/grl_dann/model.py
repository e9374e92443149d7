"""The three-headed adversarial network, its objective and training loop."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import CompositionError, ConfigError, DataError, NumericError, ShapeError
from .layers import (
    Conv2d, Dense, Flatten, GradientReversal, Layer, MaxPool2x2, ReLU,
    Sequential, softmax_xent,
)
from .optim import ScheduleConfig, SgdMomentum, lambda_schedule
from .tensor_core import Rng, Tensor, TRAIN_DTYPE, make_rng, read_rdt, write_rdt

INPUT_SHAPE = (4, 80, 80)
FEATURE_DIM = 1200
NUM_CLASSES = 3
NUM_DOMAINS = 2
CHECKPOINT_VERSION = 1


def build_feature_extractor(rng: Rng | None, dtype=TRAIN_DTYPE) -> Sequential:
    return Sequential(
        Conv2d(4, 32, 7, rng, dtype=dtype, input_grad=False), ReLU(), MaxPool2x2(),
        Conv2d(32, 32, 3, rng, dtype=dtype), ReLU(),
        Conv2d(32, 48, 3, rng, dtype=dtype), ReLU(), MaxPool2x2(),
        Conv2d(48, 48, 3, rng, dtype=dtype), ReLU(),
        Conv2d(48, 48, 3, rng, dtype=dtype), ReLU(), MaxPool2x2(), MaxPool2x2(),
        Flatten(),
    )


def build_label_predictor(rng: Rng | None, dtype=TRAIN_DTYPE, n_in: int = FEATURE_DIM,
                          n_classes: int = NUM_CLASSES) -> Sequential:
    return Sequential(
        Dense(n_in, 100, rng, dtype), ReLU(),
        Dense(100, 100, rng, dtype), ReLU(),
        Dense(100, n_classes, rng, dtype),
    )


def build_domain_classifier(rng: Rng | None, dtype=TRAIN_DTYPE,
                            n_in: int = FEATURE_DIM) -> Sequential:
    return Sequential(
        GradientReversal(0.0),
        Dense(n_in, 100, rng, dtype), ReLU(),
        Dense(100, NUM_DOMAINS, rng, dtype),
    )


class DannNetwork:
    """Feature extractor G_f with a label head G_y and, behind a gradient
    reversal layer, a domain head G_d, both reading the 1200-d bottleneck."""

    ROLES = ("feature_extractor", "label_predictor", "domain_classifier")

    def __init__(self, feature_extractor: Sequential, label_predictor: Sequential,
                 domain_classifier: Sequential):
        self.feature_extractor = feature_extractor
        self.label_predictor = label_predictor
        self.domain_classifier = domain_classifier

    @property
    def grl(self) -> GradientReversal:
        return self.domain_classifier.layers[0]

    @property
    def lam(self) -> float:
        return self.grl.lam

    @lam.setter
    def lam(self, value: float) -> None:
        if value < 0:
            raise ValueError("lambda must be nonnegative")
        self.grl.lam = value

    @property
    def dtype(self):
        return self.feature_extractor.layers[0].weight.dtype

    def heads(self) -> dict[str, Sequential]:
        return {role: getattr(self, role) for role in self.ROLES}

    def named_parameters(self) -> list[tuple[str, str, Tensor, Tensor]]:
        """(role, qualified name, value, grad) for every parameter tensor."""
        return [(role, f"{role}.{name}", v, g)
                for role, seq in self.heads().items()
                for name, v, g in seq.parameters()]

    def zero_grad(self) -> None:
        for seq in self.heads().values():
            seq.zero_grad()

    def clear_cache(self) -> None:
        for seq in self.heads().values():
            seq.clear_cache()

    def astype(self, dtype) -> "DannNetwork":
        for seq in self.heads().values():
            seq.astype(dtype)
        return self

    def features(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != INPUT_SHAPE:
            raise ShapeError(f"expected [N,4,80,80] input, got {list(x.shape)}")
        return self.feature_extractor.forward(x.astype(self.dtype, copy=False))

    def label_logits(self, f: Tensor) -> Tensor:
        return self.label_predictor.forward(f)

    def domain_logits(self, f: Tensor) -> Tensor:
        return self.domain_classifier.forward(f)

    def predict(self, x: Tensor, chunk: int = 64) -> Tensor:
        """Label logits for ``x``, evaluated in chunks with caches dropped."""
        out = [self.label_logits(self.features(x[i:i + chunk]))
               for i in range(0, len(x), chunk)]
        self.clear_cache()
        return np.concatenate(out, axis=0)

    def copy(self) -> "DannNetwork":
        buf = io.BytesIO()
        save_checkpoint(buf, self)
        buf.seek(0)
        return load_checkpoint(buf).astype(self.dtype)


def build_network(rng: Rng, dtype=TRAIN_DTYPE) -> DannNetwork:
    """He-normal weights, zero biases; draw order is extractor, label head,
    domain head, layer by layer."""
    return DannNetwork(build_feature_extractor(rng, dtype),
                       build_label_predictor(rng, dtype),
                       build_domain_classifier(rng, dtype))


def label_loss(net: DannNetwork, x_source: Tensor, y_source) -> float:
    loss, _ = softmax_xent(net.label_logits(net.features(x_source)), y_source)
    return loss


def domain_loss(net: DannNetwork, x_both: Tensor, d) -> float:
    loss, _ = softmax_xent(net.domain_logits(net.features(x_both)), d)
    return loss


@dataclass
class StepReport:
    label_loss: float
    domain_loss: float
    objective: float
    lam: float
    learning_rate: float
    progress: float


LAMBDA_MODES = ("scheduled", "fixed", "zero")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.45
    lambda_mode: str = "scheduled"
    lambda_value: float = 0.0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even and >= 2")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ConfigError(f"lambda_mode must be one of {LAMBDA_MODES}")
        if self.lambda_value < 0:
            raise ConfigError("lambda_value must be nonnegative")

    def lambda_at(self, p: float) -> float:
        if self.lambda_mode == "zero":
            return 0.0
        if self.lambda_mode == "fixed":
            return self.lambda_value
        return lambda_schedule(p)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_gradients(net: DannNetwork, images: Tensor, labels, domains, lam: float
                      ) -> tuple[float, float]:
    """Forward + backward of R = L_y - lam * L_d into the gradient buffers.

    L_y uses the labelled leading rows (len(labels)); L_d uses every row.
    Domain-head gradients are left unscaled (dL_d/dtheta_d); the extractor
    receives -lam * dL_d/df through the reversal layer.
    """
    n_src = len(labels)
    net.lam = lam
    net.zero_grad()
    f = net.features(images)
    ly, g_y = softmax_xent(net.label_logits(f[:n_src]), labels)
    ld, g_d = softmax_xent(net.domain_logits(f), domains)
    df = net.domain_classifier.backward(g_d)
    df[:n_src] += net.label_predictor.backward(g_y)
    net.feature_extractor.backward(df)
    return ly, ld


def train_step(net: DannNetwork, opt: SgdMomentum, batch, p: float, cfg: TrainConfig,
               t: float | None = None) -> StepReport:
    """One saddle-point update on a half-source / half-target batch.

    theta_f and theta_y descend R; theta_d descends lam * L_d.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"progress must lie in [0, 1], got {p}")
    domains = np.asarray(batch.domains)
    if not (np.any(domains == 0) and np.any(domains == 1)):
        raise CompositionError("training batch must contain both domains")
    lam = cfg.lambda_at(p)
    sched = cfg.schedule
    mu = sched.learning_rate(p, p * sched.total_batches if t is None else t)
    ly, ld = compute_gradients(net, batch.images, batch.labels, domains, lam)
    if not (math.isfinite(ly) and math.isfinite(ld)):
        raise NumericError(f"non-finite loss (L_y={ly}, L_d={ld})")
    for role, name, value, grad in net.named_parameters():
        if role == "domain_classifier":
            grad *= grad.dtype.type(lam)
        opt.step(name, value, grad, mu)
    net.clear_cache()
    return StepReport(ly, ld, ly - lam * ld, lam, mu, p)


def fit(net: DannNetwork, source_train, target_train, config: TrainConfig,
        callback: Callable[[int, StepReport], None] | None = None) -> list[StepReport]:
    """Train for ``config.epochs`` epochs; p runs linearly 0 -> 1 over all
    batches. Returns the per-step history."""
    from .data import batches_per_epoch, make_batches

    if len(source_train) == 0 or len(target_train) == 0:
        raise DataError("source and target training sets must be non-empty")
    per_epoch = batches_per_epoch(len(source_train), config.batch_size)
    total = config.epochs * per_epoch
    config.schedule.total_batches = total
    opt = SgdMomentum(config.momentum)
    history = []
    stream = make_batches(source_train, target_train, config.batch_size,
                          config.seed, epochs=config.epochs)
    for t, batch in enumerate(stream):
        p = t / (total - 1) if total > 1 else 0.0
        report = train_step(net, opt, batch, p, config, t=t)
        history.append(report)
        if callback is not None:
            callback(t, report)
    return history


# --- checkpoints -------------------------------------------------------------
# One JSON manifest line, then one RDT record per tensor in manifest order.


def save_checkpoint(fh, net: DannNetwork, extra: dict | None = None) -> None:
    params = net.named_parameters()
    manifest = {
        "format": "grl_dann-checkpoint",
        "version": CHECKPOINT_VERSION,
        "tensors": [{"name": name, "role": role, "shape": list(v.shape)}
                    for role, name, v, _ in params],
    }
    if extra:
        manifest["extra"] = extra
    fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
    for _, _, v, _ in params:
        write_rdt(fh, v)


def load_checkpoint(fh) -> DannNetwork:
    line = fh.readline()
    try:
        manifest = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint manifest is not JSON: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {manifest.get('version')}")
    net = DannNetwork(build_feature_extractor(None), build_label_predictor(None),
                      build_domain_classifier(None))
    expected = {name: v for _, name, v, _ in net.named_parameters()}
    entries = manifest["tensors"]
    if [e["name"] for e in entries] != list(expected):
        raise ShapeError(f"checkpoint v{CHECKPOINT_VERSION} tensor layout does not "
                         "match this network")
    for entry in entries:
        t = read_rdt(fh)
        target = expected[entry["name"]]
        if t.shape != target.shape:
            raise ShapeError(f"checkpoint v{CHECKPOINT_VERSION}: {entry['name']} has "
                             f"shape {list(t.shape)}, network expects {list(target.shape)}")
        target[...] = t
    return net


def write_checkpoint(path, net: DannNetwork, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        save_checkpoint(fh, net, extra)


def read_checkpoint(path) -> DannNetwork:
    with open(path, "rb") as fh:
        return load_checkpoint(fh)
