"""Central finite-difference check of the hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ConvLayer, backward_layers, forward_layers


@dataclass
class GradReport:
    name: str
    worst: float  # max relative error over all parameters
    checked: int  # number of scalar parameters compared

    def ok(self, tol: float = 1e-5) -> bool:
        return self.worst < tol


def _layer(rng, out_ch, in_ch, k, activation, **kw) -> ConvLayer:
    return ConvLayer(
        weight=rng.normal(0, 0.5, size=(out_ch, in_ch, k, k)),
        bias=rng.normal(0, 0.1, size=out_ch),
        slope=float(rng.uniform(0.1, 0.4)),
        activation=activation,
        **kw,
    )


def toy_networks(seed: int = 0) -> dict[str, list[ConvLayer]]:
    """Three small float64 graphs: plain chain, 1x1 bottleneck, skip-sum."""
    rng = np.random.default_rng(seed)
    chain = [_layer(rng, 3, 1, 3, True), _layer(rng, 2, 3, 3, True), _layer(rng, 1, 2, 3, False)]
    bottleneck = [_layer(rng, 4, 1, 5, True), _layer(rng, 2, 4, 1, True), _layer(rng, 1, 2, 3, False)]
    # F3 = W * F1 + W' * F2 with F2 read from the input, the P-graph pattern
    skip = [
        _layer(rng, 2, 1, 3, True),
        _layer(rng, 3, 1, 3, True, source=0),
        _layer(rng, 2, 2, 3, True, source=1, skip_weight=rng.normal(0, 0.5, size=(2, 3, 3, 3)), skip_source=2),
        _layer(rng, 1, 2, 1, False),
    ]
    return {"chain": chain, "bottleneck": bottleneck, "skip-sum": skip}


def _relerr(a, b, floor=1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_layers(layers: list[ConvLayer], x: np.ndarray, seed: int = 0, eps: float = 1e-5,
                 name: str = "net") -> GradReport:
    """Compare analytic gradients of a random projection of the output with central differences."""
    proj = np.random.default_rng(seed).normal(size=forward_layers(layers, x).shape)

    def loss() -> float:
        return float(np.sum(forward_layers(layers, x) * proj))

    _, tape = forward_layers(layers, x, record=True)
    grads = backward_layers(layers, tape, proj)
    worst, checked = 0.0, 0
    for lyr, g in zip(layers, grads):
        for key in ("weight", "bias", "skip_weight"):
            value = getattr(lyr, key)
            if value is None:
                continue
            num = np.zeros_like(value)
            flat, nflat = value.reshape(-1), num.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                hi = loss()
                flat[i] = old - eps
                lo = loss()
                flat[i] = old
                nflat[i] = (hi - lo) / (2 * eps)
            worst = max(worst, _relerr(g[key], num))
            checked += flat.size
        old = lyr.slope
        lyr.slope = old + eps
        hi = loss()
        lyr.slope = old - eps
        lo = loss()
        lyr.slope = old
        worst = max(worst, _relerr(g["slope"], (hi - lo) / (2 * eps)))
        checked += 1
    return GradReport(name, worst, checked)


def run_suite(seed: int = 0, size: int = 7) -> list[GradReport]:
    x = np.random.default_rng(seed + 1).normal(size=(1, 1, size, size))
    return [check_layers(layers, x, seed, name=name) for name, layers in toy_networks(seed).items()]
