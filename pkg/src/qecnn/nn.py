"""Minimal convolutional network primitives.

Everything here works on numpy arrays laid out as ``(batch, channels, height,
width)``; single feature maps ``(channels, height, width)`` are accepted by the
public wrappers and promoted to a batch of one.

Convolutions are stride 1 with zero "same" padding, so spatial size is always
preserved. A layer can optionally add a second convolution over another
feature map before the bias and activation, which is how the skip-sum layers
of the inter-frame network are expressed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError

DEFAULT_SLOPE = 0.25

# im2col chunks are capped at roughly this many bytes
_CHUNK_BYTES = 64 * 2**20


class ShapeError(ValidationError):
    """Raised when arrays handed to a primitive have incompatible shapes."""


@dataclass
class ConvLayer:
    """One convolution (plus optional skip convolution) with PReLU.

    ``source`` is the index of the feature map convolved by ``weight``, where
    index 0 is the network input and index ``i`` the output of layer ``i``.
    When ``skip_weight`` is set it convolves feature map ``skip_source`` and
    the two results are summed before the bias.
    """

    weight: np.ndarray
    bias: np.ndarray
    slope: float = DEFAULT_SLOPE
    activation: bool = True
    source: int = -1
    skip_weight: Optional[np.ndarray] = None
    skip_source: Optional[int] = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias, dtype=self.weight.dtype)
        if self.weight.ndim != 4:
            raise ShapeError(f"weight must be 4-D (out, in, kh, kw), got {self.weight.shape}")
        out_ch, _, kh, kw = self.weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel must have odd dimensions, got {kh}x{kw}")
        if self.bias.shape != (out_ch,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {out_ch} filters")
        if self.skip_weight is not None:
            self.skip_weight = np.asarray(self.skip_weight, dtype=self.weight.dtype)
            if self.skip_weight.ndim != 4 or self.skip_weight.shape[0] != out_ch:
                raise ShapeError(f"skip weight shape {self.skip_weight.shape} incompatible with {out_ch} filters")
            if self.skip_weight.shape[2] % 2 == 0 or self.skip_weight.shape[3] % 2 == 0:
                raise ShapeError("skip kernel must have odd dimensions")
            if self.skip_source is None:
                raise ShapeError("skip_weight given without skip_source")
        self.slope = float(self.slope)

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def astype(self, dtype) -> "ConvLayer":
        return replace(
            self,
            weight=self.weight.astype(dtype),
            bias=self.bias.astype(dtype),
            skip_weight=None if self.skip_weight is None else self.skip_weight.astype(dtype),
        )

    def copy(self) -> "ConvLayer":
        return self.astype(self.weight.dtype)


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    clip_beta: float = 0.01
    decay_factor: float = 10.0
    decay_epochs: int = 40
    batch_size: int = 128

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.clip_beta <= 0:
            raise ValueError("clip_beta must be positive")
        if self.decay_factor <= 1:
            raise ValueError("decay_factor must exceed 1")
        if self.decay_epochs < 1 or self.batch_size < 1:
            raise ValueError("decay_epochs and batch_size must be >= 1")

    def effective_rate(self, epoch: int) -> float:
        return self.learning_rate / self.decay_factor ** (epoch // self.decay_epochs)


# --------------------------------------------------------------------------
# elementwise activation


def prelu(x, slope: float):
    """max(0, x) + slope * min(0, x), elementwise."""
    x = np.asarray(x)
    return np.maximum(x, 0) + slope * np.minimum(x, 0)


def prelu_backward(grad_out: np.ndarray, pre: np.ndarray, slope: float):
    """Return (grad wrt pre-activation, grad wrt slope)."""
    neg = pre < 0
    grad_pre = np.where(neg, slope * grad_out, grad_out)
    grad_slope = float(np.sum(grad_out[neg] * pre[neg]))
    return grad_pre, grad_slope


# --------------------------------------------------------------------------
# convolution


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C, H, W) or (N, C, H, W), got shape {x.shape}")


def _conv_same(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Zero-padded same-size correlation of a batch with a filter bank."""
    n, c, h, w = x.shape
    out_ch, in_ch, kh, kw = weight.shape
    if c != in_ch:
        raise ShapeError(f"input has {c} channels, layer expects {in_ch}")
    dtype = np.result_type(x.dtype, weight.dtype)
    x = x.astype(dtype, copy=False)
    if kh == 1 and kw == 1:
        return np.einsum("oc,nchw->nohw", weight[:, :, 0, 0].astype(dtype), x, optimize=True)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    wmat = weight.reshape(out_ch, -1).astype(dtype).T  # (c*kh*kw, out)
    out = np.empty((n, out_ch, h, w), dtype=dtype)
    row_bytes = w * c * kh * kw * dtype.itemsize
    rows = max(1, min(h, _CHUNK_BYTES // max(row_bytes, 1)))
    for b in range(n):
        for r0 in range(0, h, rows):
            r1 = min(h, r0 + rows)
            win = sliding_window_view(xp[b, :, r0:r1 + kh - 1], (kh, kw), axis=(1, 2))
            # win: (c, rows, w, kh, kw) -> (rows*w, c*kh*kw)
            cols = win.transpose(1, 2, 0, 3, 4).reshape((r1 - r0) * w, -1)
            out[b, :, r0:r1] = (cols @ wmat).T.reshape(out_ch, r1 - r0, w)
    return out


def _conv_weight_grad(x: np.ndarray, grad_out: np.ndarray, kernel: tuple[int, int]) -> np.ndarray:
    n, c, h, w = x.shape
    kh, kw = kernel
    out_ch = grad_out.shape[1]
    if kh == 1 and kw == 1:
        return np.einsum("nohw,nchw->oc", grad_out, x, optimize=True)[:, :, None, None]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    gw = np.zeros((out_ch, c * kh * kw), dtype=np.result_type(x.dtype, grad_out.dtype))
    row_bytes = w * c * kh * kw * gw.dtype.itemsize
    rows = max(1, min(h, _CHUNK_BYTES // max(row_bytes, 1)))
    for b in range(n):
        for r0 in range(0, h, rows):
            r1 = min(h, r0 + rows)
            win = sliding_window_view(xp[b, :, r0:r1 + kh - 1], (kh, kw), axis=(1, 2))
            cols = win.transpose(1, 2, 0, 3, 4).reshape((r1 - r0) * w, -1)
            gw += grad_out[b, :, r0:r1].reshape(out_ch, -1) @ cols
    return gw.reshape(out_ch, c, kh, kw)


def _conv_input_grad(grad_out: np.ndarray, weight: np.ndarray) -> np.ndarray:
    # adjoint of a same-padded odd-kernel correlation is the same-padded
    # correlation with the flipped, channel-transposed kernel
    flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return _conv_same(grad_out, np.ascontiguousarray(flipped))


def conv2d_forward(x: np.ndarray, layer: ConvLayer, skip: Optional[np.ndarray] = None) -> np.ndarray:
    """Apply one layer: convolution(s), bias and (if enabled) PReLU.

    ``x`` may be ``(C, H, W)`` or ``(N, C, H, W)``; the result has the same rank.
    ``skip`` is the feature map fed to ``layer.skip_weight`` and is required
    exactly when the layer has one.
    """
    xb, squeeze = _as_batch(x)
    if xb.shape[1] != layer.in_channels:
        raise ShapeError(f"input has {xb.shape[1]} channels, layer expects {layer.in_channels}")
    z = _conv_same(xb, layer.weight)
    if layer.skip_weight is not None:
        if skip is None:
            raise ShapeError("layer has a skip convolution but no skip input was given")
        sb, _ = _as_batch(skip)
        z += _conv_same(sb, layer.skip_weight)
    elif skip is not None:
        raise ShapeError("skip input given to a layer without skip weights")
    z += layer.bias[None, :, None, None]
    out = prelu(z, layer.slope) if layer.activation else z
    return out[0] if squeeze else out


# --------------------------------------------------------------------------
# layer stacks


@dataclass
class Tape:
    """Activations recorded by :func:`forward_layers` for the backward pass."""

    features: list = field(default_factory=list)  # F_0 .. F_L
    pre_activations: list = field(default_factory=list)  # one per layer


def _source(layer: ConvLayer, i: int) -> int:
    return i - 1 if layer.source < 0 else layer.source


def forward_layers(layers: Sequence[ConvLayer], x: np.ndarray, record: bool = False):
    """Evaluate a layer stack on a batch; returns output or (output, tape)."""
    xb, squeeze = _as_batch(x)
    dtype = layers[0].weight.dtype
    feats = [xb.astype(dtype, copy=False)]
    pres = []
    for i, layer in enumerate(layers, start=1):
        src = feats[_source(layer, i)]
        z = _conv_same(src, layer.weight)
        if layer.skip_weight is not None:
            z += _conv_same(feats[layer.skip_source], layer.skip_weight)
        z += layer.bias[None, :, None, None]
        if record:
            pres.append(z)
        feats.append(prelu(z, layer.slope) if layer.activation else z)
    out = feats[-1]
    if squeeze:
        out = out[0]
    if record:
        return out, Tape(feats, pres)
    return out


def backward_layers(layers: Sequence[ConvLayer], tape: Tape, grad_out: np.ndarray) -> list[dict]:
    """Reverse-mode gradients of a scalar loss given d loss / d output.

    Returns one dict per layer with keys ``weight``, ``bias``, ``slope`` and,
    for skip layers, ``skip_weight``; arrays match the parameter shapes.
    """
    if len(tape.features) != len(layers) + 1 or len(tape.pre_activations) != len(layers):
        raise RuntimeError("tape does not match the layer stack; rerun forward with record=True")
    gb, _ = _as_batch(grad_out)
    if gb.shape != tape.features[-1].shape:
        raise RuntimeError(f"output gradient shape {gb.shape} != output shape {tape.features[-1].shape}")
    feat_grads: list = [None] * (len(layers) + 1)
    feat_grads[-1] = gb
    grads: list[dict] = [None] * len(layers)

    def accumulate(idx, g):
        feat_grads[idx] = g if feat_grads[idx] is None else feat_grads[idx] + g

    for i in range(len(layers), 0, -1):
        layer = layers[i - 1]
        g = feat_grads[i]
        if g is None:  # output of this layer never reaches the loss
            g = np.zeros_like(tape.features[i])
        pre = tape.pre_activations[i - 1]
        if layer.activation:
            gz, gslope = prelu_backward(g, pre, layer.slope)
        else:
            gz, gslope = g, 0.0
        src = _source(layer, i)
        entry = {
            "weight": _conv_weight_grad(tape.features[src], gz, layer.kernel_size),
            "bias": gz.sum(axis=(0, 2, 3)),
            "slope": gslope,
        }
        if src > 0:
            accumulate(src, _conv_input_grad(gz, layer.weight))
        if layer.skip_weight is not None:
            skip = layer.skip_source
            entry["skip_weight"] = _conv_weight_grad(
                tape.features[skip], gz, layer.skip_weight.shape[2:]
            )
            if skip > 0:
                accumulate(skip, _conv_input_grad(gz, layer.skip_weight))
        grads[i - 1] = entry
    return grads


def backward_pass(net, x: np.ndarray, loss_grad: np.ndarray) -> list[dict]:
    """Gradients of every parameter of ``net`` (anything with ``.layers``).

    ``loss_grad`` is d loss / d (last layer output). For residual networks the
    skip-add of the input does not change this derivative.
    """
    _, tape = forward_layers(net.layers, x, record=True)
    return backward_layers(net.layers, tape, loss_grad)


# --------------------------------------------------------------------------
# optimisation


PARAM_KEYS = ("weight", "bias", "slope", "skip_weight")


def clip_bound(cfg: TrainConfig, epoch: int) -> float:
    return abs(cfg.clip_beta / cfg.effective_rate(epoch))


def sgd_step(layers: Sequence[ConvLayer], grads: Sequence[dict], cfg: TrainConfig, epoch: int,
             lr_scale: Optional[Sequence[float]] = None) -> list[ConvLayer]:
    """One clipped SGD update; returns new layers, inputs are left untouched.

    Each gradient component is clipped to +-|beta / rate| before
    ``p <- p - rate * g`` with ``rate = lr / decay_factor ** (epoch // decay_epochs)``.
    ``lr_scale`` optionally scales the rate per layer (the clip bound follows
    the scaled rate).
    """
    if len(layers) != len(grads):
        raise ShapeError("one gradient entry per layer is required")
    base = cfg.effective_rate(epoch)
    updated = []
    for idx, (layer, g) in enumerate(zip(layers, grads)):
        rate = base * (1.0 if lr_scale is None else lr_scale[idx])
        bound = abs(cfg.clip_beta / rate)
        new = {}
        for key in PARAM_KEYS:
            value = getattr(layer, key)
            if value is None or key not in g:
                continue
            grad = np.asarray(g[key])
            if np.shape(grad) != np.shape(value):
                raise ShapeError(f"layer {idx + 1} {key}: gradient shape {np.shape(grad)} != {np.shape(value)}")
            step = rate * np.clip(grad, -bound, bound)
            new[key] = value - step.astype(np.asarray(value).dtype) if key != "slope" else value - float(step)
        updated.append(replace(layer, **new))
    return updated
