"""Finite-difference verification of every hand-written backward pass."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .layers import Conv2d, Dense, MaxPool2x2, ReLU, softmax_xent
from .model import build_network, compute_gradients
from .tensor_core import CHECK_DTYPE, finite_diff_grad, make_rng, relative_error

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    worst_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst_error) and self.worst_error < self.tolerance)


def _layer_check(layer, x: np.ndarray, rng) -> float:
    """Analytic vs numeric gradients of L = sum(R * layer(x)) wrt x and params."""
    out = layer.forward(x)
    r = rng.standard_normal(out.shape)
    layer.zero_grad()
    dx = layer.backward(r)
    analytic = [("input", x, dx)] + [(n, v, g.copy()) for n, v, g in layer.parameters()]
    worst = 0.0
    for name, tensor, grad in analytic:
        if grad is None:
            continue
        original = tensor.copy()

        def loss(t, tensor=tensor):
            tensor[...] = t
            return float(np.sum(r * layer.forward(x)))

        numeric = finite_diff_grad(loss, original)
        tensor[...] = original
        worst = max(worst, relative_error(grad, numeric))
    return worst


def check_conv(seed: int, padding: str = "same", kernel: int = 3) -> float:
    rng = make_rng(seed)
    if kernel == 3:
        n, c_in, c_out, size = 2, 4, 5, 8
    else:
        n, c_in, c_out, size = 1, 2, 2, 9
    layer = Conv2d(c_in, c_out, kernel, rng, padding=padding, dtype=CHECK_DTYPE)
    layer.bias[...] = rng.standard_normal(layer.bias.shape)
    return _layer_check(layer, rng.standard_normal((n, c_in, size, size)), rng)


def check_maxpool(seed: int) -> float:
    rng = make_rng(seed)
    # distinct values spaced well beyond h so no window tie flips under perturbation
    x = rng.permutation(2 * 3 * 5 * 5).reshape(2, 3, 5, 5).astype(CHECK_DTYPE) * 0.01
    return _layer_check(MaxPool2x2(), x, rng)


def check_relu(seed: int) -> float:
    rng = make_rng(seed)
    x = rng.standard_normal((3, 17))
    x = np.where(np.abs(x) < 1e-3, np.sign(x + 1e-12) * 1e-3, x)
    return _layer_check(ReLU(), x, rng)


def check_dense(seed: int) -> float:
    rng = make_rng(seed)
    layer = Dense(10, 7, rng, dtype=CHECK_DTYPE)
    layer.bias[...] = rng.standard_normal(7)
    return _layer_check(layer, rng.standard_normal((4, 10)), rng)


def check_softmax_xent(seed: int) -> float:
    rng = make_rng(seed)
    logits = rng.standard_normal((5, 3)) * 2
    labels = rng.integers(0, 3, 5)
    _, grad = softmax_xent(logits, labels)
    numeric = finite_diff_grad(lambda z: softmax_xent(z, labels)[0], logits)
    return relative_error(grad, numeric)


def _probe_indices(rng, size: int, count: int) -> np.ndarray:
    return rng.choice(size, size=min(count, size), replace=False)


def check_network_objective(seed: int, lam: float = 0.6, probes: int = 2) -> float:
    """Gradient of R = L_y - lam * L_d on a one-source, one-target batch,
    probed on a few coordinates of every parameter tensor in all heads."""
    rng = make_rng(seed)
    net = build_network(rng, dtype=CHECK_DTYPE)
    for _, _, v, _ in net.named_parameters():
        if v.ndim == 1:
            v[...] = 0.05 * rng.standard_normal(v.shape)
    x = rng.random((2, 4, 80, 80))
    labels = rng.integers(0, 3, 1)
    domains = np.array([0, 1])

    ly, ld = compute_gradients(net, x, labels, domains, lam)

    def objective():
        f = net.features(x)
        ly_, _ = softmax_xent(net.label_logits(f[:1]), labels)
        ld_, _ = softmax_xent(net.domain_logits(f), domains)
        return ly_, ld_

    worst = 0.0
    for role, name, value, grad in net.named_parameters():
        grad = grad.copy()
        flat = value.reshape(-1)
        for i in _probe_indices(rng, flat.size, probes):
            orig = flat[i]

            def f_at(t):
                flat[i] = t[0]
                ly_, ld_ = objective()
                # the domain head descends L_d; the rest descends R
                return ld_ if role == "domain_classifier" else ly_ - lam * ld_

            numeric = finite_diff_grad(f_at, np.array([orig]))[0]
            flat[i] = orig
            worst = max(worst, relative_error(grad.reshape(-1)[i], numeric))
    net.clear_cache()
    return worst


LAYER_CHECKS: dict[str, Callable[[int], float]] = {
    "conv2d_same": lambda s: check_conv(s, "same", 3),
    "conv2d_valid": lambda s: check_conv(s, "valid", 3),
    "conv2d_7x7": lambda s: check_conv(s, "same", 7),
    "maxpool2x2": check_maxpool,
    "relu": check_relu,
    "dense": check_dense,
    "softmax_xent": check_softmax_xent,
}


def run_gradcheck(seeds: Iterable[int] = range(5), tol: float = TOLERANCE,
                  network_seeds: Iterable[int] | None = None) -> list[CheckResult]:
    seeds = list(seeds)
    results = [CheckResult(name, s, fn(s), tol)
               for name, fn in LAYER_CHECKS.items() for s in seeds]
    for s in (seeds if network_seeds is None else network_seeds):
        results.append(CheckResult("network_objective", s, check_network_objective(s), tol))
    return results


def worst_by_check(results: list[CheckResult]) -> dict[str, float]:
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.worst_error)
    return worst


@contextlib.contextmanager
def injected_fault(kind: str):
    """Temporarily corrupt a backward pass so the suite can prove it notices."""
    if kind != "conv_sign":
        raise ValueError(f"unknown fault {kind!r}")
    original = Conv2d.backward

    def flipped(self, grad_out):
        return original(self, -grad_out)

    Conv2d.backward = flipped
    try:
        yield
    finally:
        Conv2d.backward = original
