"""QE-CNN-I / QE-CNN-P network graphs, losses, training and weight files."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError
from .nn import (
    DEFAULT_SLOPE,
    ConvLayer,
    TrainConfig,
    backward_layers,
    forward_layers,
    sgd_step,
)

QPS = (22, 27, 32, 37, 42, 47)

I_KERNELS = (9, 7, 3, 1, 5)
I_FILTERS = (128, 64, 64, 32, 1)
# conv 5 of the inter network reads the raw input with a 9x9 bank of 128
P_BRANCH_KERNEL = 9
P_BRANCH_FILTERS = 128

MAGIC = b"QECN"
FORMAT_VERSION = 1


class WeightFormatError(FormatError):
    """A weight container is malformed."""


class Kind(Enum):
    QECNN_I = 0
    QECNN_P = 1


@dataclass
class NetworkGraph:
    kind: Kind
    qp: int
    layers: list[ConvLayer] = field(default_factory=list)

    @property
    def residual(self) -> bool:
        return self.kind is Kind.QECNN_P

    @property
    def skip_weights(self) -> list[np.ndarray]:
        """Second weight sets of the skip-sum layers (6-9 of the P graph)."""
        return [layer.skip_weight for layer in self.layers if layer.skip_weight is not None]

    def copy(self) -> "NetworkGraph":
        return NetworkGraph(self.kind, self.qp, [layer.copy() for layer in self.layers])

    def astype(self, dtype) -> "NetworkGraph":
        return NetworkGraph(self.kind, self.qp, [layer.astype(dtype) for layer in self.layers])

    def validate(self) -> "NetworkGraph":
        _check_graph(self)
        return self

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return forward(self, y)


@dataclass
class PatchPair:
    """Ground truth ``x`` and its compressed version ``y``, scaled to [0, 1]."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.y = np.asarray(self.y)
        if self.x.shape != self.y.shape:
            raise ValueError(f"patch shapes differ: {self.x.shape} vs {self.y.shape}")


# --------------------------------------------------------------------------
# construction


def _layer_plan(kind: Kind) -> list[dict]:
    """Layer topology: kernel, filters, in-channels, sources, activation."""
    layers = []
    prev = 1
    for i, (k, f) in enumerate(zip(I_KERNELS, I_FILTERS), start=1):
        if kind is Kind.QECNN_I or i <= 4:
            layers.append(dict(k=k, out=f, inp=prev, source=i - 1, act=i < 5))
            prev = f
    if kind is Kind.QECNN_I:
        return layers
    layers.append(dict(k=P_BRANCH_KERNEL, out=P_BRANCH_FILTERS, inp=1, source=0, act=True))
    # conv 6..9: W1 reads F_{i-5} (conv 1-4 path), W2 reads F_{i-1}
    path_in = I_FILTERS[:4]
    skip_in = (P_BRANCH_FILTERS,) + I_FILTERS[1:4]
    for j, (k, f) in enumerate(zip(I_KERNELS[1:], I_FILTERS[1:])):
        i = 6 + j
        layers.append(dict(k=k, out=f, inp=path_in[j], source=i - 5, act=i < 9,
                           skip_in=skip_in[j], skip_source=i - 1))
    return layers


def _init_weight(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_network(kind: Kind | str, qp: int, seed: Optional[int] = 0, dtype=np.float32,
                  zero: bool = False) -> NetworkGraph:
    """Fresh network with fan-in-scaled uniform weights (or all zeros).

    Biases start at zero and PReLU slopes at 0.25.
    """
    kind = Kind[kind] if isinstance(kind, str) else kind
    if qp not in QPS:
        raise ConfigurationError(f"qp must be one of {QPS}, got {qp}")
    rng = np.random.default_rng(seed)
    layers = []
    for s in _layer_plan(kind):
        shape = (s["out"], s["inp"], s["k"], s["k"])
        make = (lambda sh: np.zeros(sh, dtype)) if zero else (lambda sh: _init_weight(rng, sh, dtype))
        skip_w = None
        if "skip_in" in s:
            skip_w = make((s["out"], s["skip_in"], s["k"], s["k"]))
        layers.append(ConvLayer(
            weight=make(shape),
            bias=np.zeros(s["out"], dtype),
            slope=DEFAULT_SLOPE,
            activation=s["act"],
            source=s["source"],
            skip_weight=skip_w,
            skip_source=s.get("skip_source"),
        ))
    return NetworkGraph(kind, qp, layers)


def _check_graph(net: NetworkGraph) -> None:
    expected = _layer_plan(net.kind)
    if len(net.layers) != len(expected):
        raise ConfigurationError(
            f"{net.kind.name} needs {len(expected)} layers, graph has {len(net.layers)}")
    for i, (layer, s) in enumerate(zip(net.layers, expected), start=1):
        shape = (s["out"], s["inp"], s["k"], s["k"])
        if layer.weight.shape != shape:
            raise ConfigurationError(f"layer {i}: weight shape {layer.weight.shape}, expected {shape}")
        if layer.activation != s["act"]:
            raise ConfigurationError(f"layer {i}: activation flag should be {s['act']}")
        if layer.source != s["source"]:
            raise ConfigurationError(f"layer {i}: reads F{layer.source}, expected F{s['source']}")
        if "skip_in" in s:
            skip_shape = (s["out"], s["skip_in"], s["k"], s["k"])
            if layer.skip_weight is None or layer.skip_weight.shape != skip_shape:
                got = None if layer.skip_weight is None else layer.skip_weight.shape
                raise ConfigurationError(f"layer {i}: skip weight shape {got}, expected {skip_shape}")
            if layer.skip_source != s["skip_source"]:
                raise ConfigurationError(f"layer {i}: skip reads F{layer.skip_source}, expected F{s['skip_source']}")
        elif layer.skip_weight is not None:
            raise ConfigurationError(f"layer {i}: unexpected skip weights")


# --------------------------------------------------------------------------
# inference


def _prepare(net: NetworkGraph, y: np.ndarray, kind: Kind) -> np.ndarray:
    if net.kind is not kind:
        raise ConfigurationError(f"expected a {kind.name} graph, got {net.kind.name}")
    _check_graph(net)
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    return y


def forward_qecnn_i(net: NetworkGraph, y: np.ndarray) -> np.ndarray:
    """Restored plane F5(Y) for a plane (H, W) or batch (N, 1, H, W) in [0, 1]."""
    plane = np.asarray(y).ndim == 2
    out = forward_layers(net.layers, _prepare(net, y, Kind.QECNN_I))
    return out[0] if plane else out


def forward_qecnn_p(net: NetworkGraph, y: np.ndarray) -> np.ndarray:
    """Residual reconstruction Y + F9(Y)."""
    plane = np.asarray(y).ndim == 2
    yb = _prepare(net, y, Kind.QECNN_P)
    out = yb.astype(net.layers[0].weight.dtype) + forward_layers(net.layers, yb)
    return out[0] if plane else out


def forward(net: NetworkGraph, y: np.ndarray) -> np.ndarray:
    if net.kind is Kind.QECNN_I:
        return forward_qecnn_i(net, y)
    return forward_qecnn_p(net, y)


def enhance_plane(net: NetworkGraph, plane: np.ndarray) -> np.ndarray:
    """8-bit in, 8-bit out: scale to [0, 1], run, clamp and round back."""
    y = np.asarray(plane, dtype=np.float32) / 255.0
    out = forward(net, y)
    return np.rint(np.clip(out, 0.0, 1.0) * 255.0).astype(np.uint8)


def init_p_from_i(i_net: NetworkGraph, p_net: NetworkGraph) -> NetworkGraph:
    """Copy conv 1-3 of a trained I graph into a copy of the P graph."""
    if i_net.kind is not Kind.QECNN_I or p_net.kind is not Kind.QECNN_P:
        raise ConfigurationError("init_p_from_i needs an I graph and a P graph")
    _check_graph(i_net)
    _check_graph(p_net)
    out = p_net.copy()
    for i in range(3):
        src = i_net.layers[i]
        out.layers[i] = replace(out.layers[i], weight=src.weight.copy(), bias=src.bias.copy(),
                                slope=src.slope)
    return out


# --------------------------------------------------------------------------
# loss and training


def _loss_target(pairs_x: np.ndarray, pairs_y: np.ndarray, mode: str) -> np.ndarray:
    if mode == "direct":
        return pairs_x
    if mode == "residual":
        return pairs_x - pairs_y
    raise ValueError(f"loss mode must be 'direct' or 'residual', got {mode!r}")


def compute_loss(net_output, pair: PatchPair | Sequence[PatchPair], mode: str = "direct") -> float:
    """Per-pixel mean squared error, averaged over the samples.

    ``direct`` compares F(Y) with X, ``residual`` compares F(Y) with X - Y.
    ``net_output`` is one plane for a single pair, or a stack for a list.
    """
    pairs = [pair] if isinstance(pair, PatchPair) else list(pair)
    out = np.asarray(net_output, dtype=np.float64).reshape(len(pairs), *pairs[0].x.shape)
    xs = np.stack([p.x for p in pairs]).astype(np.float64)
    ys = np.stack([p.y for p in pairs]).astype(np.float64)
    if out.shape != xs.shape:
        raise ValueError(f"output shape {out.shape} does not match targets {xs.shape}")
    target = _loss_target(xs, ys, mode)
    return float(np.mean((out - target) ** 2))


def loss_and_grads(net: NetworkGraph, xs: np.ndarray, ys: np.ndarray):
    """Loss of a batch (N, H, W) and its gradients for every parameter.

    I graphs use the direct target, P graphs the residual one; in both cases
    the loss is taken on the last layer's output.
    """
    mode = "residual" if net.residual else "direct"
    dtype = net.layers[0].weight.dtype
    yb = ys[:, None].astype(dtype)
    target = _loss_target(xs, ys, mode)[:, None].astype(dtype)
    out, tape = forward_layers(net.layers, yb, record=True)
    diff = out - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad_out = (2.0 / diff.size) * diff
    return loss, backward_layers(net.layers, tape, grad_out)


@dataclass
class TrainLog:
    batch_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0
    initial_loss: float = float("nan")

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else self.initial_loss

    @property
    def reduction(self) -> float:
        return self.initial_loss / self.final_loss


def train(net: NetworkGraph, pairs: Sequence[PatchPair], cfg: TrainConfig, steps: int,
          seed: int = 0, target_reduction: Optional[float] = None,
          lr_scale: Optional[Sequence[float]] = None, callback=None) -> tuple[NetworkGraph, TrainLog]:
    """Mini-batch SGD on a private copy of ``net``.

    An epoch is one pass over ``pairs`` in a fresh random order. The full-set
    loss is evaluated at the end of every epoch (and after the last step);
    training stops early once it has dropped by ``target_reduction``.
    """
    rng = np.random.default_rng(seed)
    work = net.copy()
    xs = np.stack([p.x for p in pairs]).astype(np.float64)
    ys = np.stack([p.y for p in pairs]).astype(np.float64)
    n = len(pairs)
    batch = min(cfg.batch_size, n)
    per_epoch = -(-n // batch)
    log = TrainLog(initial_loss=full_loss(work, xs, ys))
    order = rng.permutation(n)
    for step in range(steps):
        epoch, slot = divmod(step, per_epoch)
        if slot == 0:
            order = rng.permutation(n)
        idx = order[slot * batch:(slot + 1) * batch]
        loss, grads = loss_and_grads(work, xs[idx], ys[idx])
        work.layers = sgd_step(work.layers, grads, cfg, epoch, lr_scale=lr_scale)
        log.batch_losses.append(loss)
        log.steps = step + 1
        if slot == per_epoch - 1 or step == steps - 1:
            log.epoch_losses.append(full_loss(work, xs, ys))
            if callback is not None:
                callback(epoch, log)
            if target_reduction is not None and log.reduction >= target_reduction:
                break
    return work, log


def full_loss(net: NetworkGraph, xs: np.ndarray, ys: np.ndarray) -> float:
    mode = "residual" if net.residual else "direct"
    out = forward_layers(net.layers, ys[:, None].astype(net.layers[0].weight.dtype))
    target = _loss_target(xs, ys, mode)[:, None]
    return float(np.mean((out.astype(np.float64) - target) ** 2))


# --------------------------------------------------------------------------
# model zoo


class ModelZoo:
    """At most one I and one P graph per QP."""

    def __init__(self, nets: Iterable[NetworkGraph] = ()):
        self._nets: dict[tuple[Kind, int], NetworkGraph] = {}
        for net in nets:
            self.register(net)

    def register(self, net: NetworkGraph) -> None:
        if net.qp not in QPS:
            raise ConfigurationError(f"qp must be one of {QPS}, got {net.qp}")
        key = (net.kind, net.qp)
        if key in self._nets:
            raise ConfigurationError(f"a {net.kind.name} graph is already registered for qp {net.qp}")
        self._nets[key] = net.validate()

    def get(self, kind: Kind, qp: int) -> NetworkGraph:
        try:
            return self._nets[(kind, qp)]
        except KeyError:
            raise ConfigurationError(f"no {kind.name} model registered for qp {qp}") from None

    def has(self, kind: Kind, qp: int) -> bool:
        return (kind, qp) in self._nets

    def __iter__(self):
        return iter(self._nets.values())

    def __len__(self):
        return len(self._nets)

    @classmethod
    def load_dir(cls, path) -> "ModelZoo":
        from pathlib import Path

        zoo = cls()
        for f in sorted(Path(path).glob("*.qecn")):
            zoo.register(load_weights(f.read_bytes()))
        return zoo

    def save_dir(self, path) -> None:
        from pathlib import Path

        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        for net in self:
            name = "i" if net.kind is Kind.QECNN_I else "p"
            (out / f"qecnn_{name}_qp{net.qp}.qecn").write_bytes(save_weights(net))


# --------------------------------------------------------------------------
# weight container
#
# little-endian: "QECN", version u8, kind u8, qp u8, layer count u8, then per
# layer kh, kw, in, out (u16 each), f32 weights (out, in, kh, kw), f32 bias,
# f32 slope, and for P layers 6-9 a second header + f32 block for W2.


def _pack_block(buf: io.BytesIO, weight: np.ndarray) -> None:
    out_ch, in_ch, kh, kw = weight.shape
    buf.write(struct.pack("<4H", kh, kw, in_ch, out_ch))
    buf.write(np.ascontiguousarray(weight, dtype="<f4").tobytes())


def save_weights(net: NetworkGraph) -> bytes:
    _check_graph(net)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<4B", FORMAT_VERSION, net.kind.value, net.qp, len(net.layers)))
    for layer in net.layers:
        _pack_block(buf, layer.weight)
        buf.write(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
        buf.write(struct.pack("<f", layer.slope))
        if layer.skip_weight is not None:
            _pack_block(buf, layer.skip_weight)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise WeightFormatError(f"truncated container: {what} needs {n} bytes, "
                                    f"{len(self.data) - self.pos} left")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def _read_block(r: _Reader, layer_no: int, expected: tuple, what: str) -> np.ndarray:
    kh, kw, in_ch, out_ch = struct.unpack("<4H", r.take(8, f"layer {layer_no} {what} header"))
    shape = (out_ch, in_ch, kh, kw)
    if shape != expected:
        raise WeightFormatError(f"layer {layer_no}: {what} header {shape} does not match expected {expected}")
    count = out_ch * in_ch * kh * kw
    raw = r.take(4 * count, f"layer {layer_no} {what}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)


def load_weights(data: bytes) -> NetworkGraph:
    r = _Reader(bytes(data))
    if bytes(r.take(4, "magic")) != MAGIC:
        raise WeightFormatError("bad magic: not a QECN weight container")
    version, kind_id, qp, count = struct.unpack("<4B", r.take(4, "header"))
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported container version {version}")
    try:
        kind = Kind(kind_id)
    except ValueError:
        raise WeightFormatError(f"unknown network kind {kind_id}") from None
    plan = _layer_plan(kind)
    if count != len(plan):
        raise WeightFormatError(f"{kind.name} container declares {count} layers, expected {len(plan)}")
    layers = []
    for i, s in enumerate(plan, start=1):
        weight = _read_block(r, i, (s["out"], s["inp"], s["k"], s["k"]), "weights")
        bias = np.frombuffer(r.take(4 * s["out"], f"layer {i} bias"), dtype="<f4").astype(np.float32)
        (slope,) = struct.unpack("<f", r.take(4, f"layer {i} slope"))
        skip = None
        if "skip_in" in s:
            skip = _read_block(r, i, (s["out"], s["skip_in"], s["k"], s["k"]), "skip weights")
        layers.append(ConvLayer(weight=weight, bias=bias, slope=slope, activation=s["act"],
                                source=s["source"], skip_weight=skip, skip_source=s.get("skip_source")))
    if r.pos != len(r.data):
        raise WeightFormatError(f"{len(r.data) - r.pos} trailing bytes after layer {count}")
    net = NetworkGraph(kind, qp, layers)
    if qp not in QPS:
        raise WeightFormatError(f"qp {qp} is not one of {QPS}")
    return net
