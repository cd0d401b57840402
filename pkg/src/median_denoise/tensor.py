"""Dense 4D tensors with reverse-mode automatic differentiation.

Every value flowing through the network is a (batch, channel, height, width)
float array wrapped in a :class:`Value`.  Operations are recorded on a
:class:`Tape`; calling :meth:`Tape.backward` replays the records in reverse
and accumulates gradients into the participating :class:`Parameter` buffers.

Two precisions are supported: float32 (training default) and float64
(gradient-check mode, where finite differences need the extra headroom).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import median_ops

__all__ = [
    "Value",
    "Parameter",
    "BatchNormState",
    "Tape",
    "finite_diff_grad",
]

_next_id = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as4d(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.ndim != 4:
        raise ShapeError(f"expected a 4D (n, c, h, w) array, got shape {arr.shape}")
    return arr


class Value:
    """A node in the computation graph holding a 4D array (or a scalar loss)."""

    __slots__ = ("data", "id")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.id = next(_next_id)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(id={self.id}, shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Value):
    """A learnable tensor with a persistent, additively-accumulated gradient."""

    __slots__ = ("grad", "name")

    def __init__(self, data: np.ndarray, name: str = ""):
        super().__init__(np.ascontiguousarray(data))
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


@dataclass
class BatchNormState:
    """Per-channel running statistics for one batchnorm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    initialized: bool = False

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5,
               dtype=np.float32) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


@dataclass
class OpRecord:
    """One forward operation: kind, operands, output and its backward rule."""

    kind: str
    inputs: tuple
    output: Value
    backward: Callable
    ctx: dict = field(default_factory=dict)


class Tape:
    """Ordered record of forward operations, replayed in reverse for grads."""

    def __init__(self):
        self.records: list[OpRecord] = []

    def _push(self, kind, inputs, out_data, backward, ctx=None):
        out = Value(out_data)
        self.records.append(OpRecord(kind, tuple(inputs), out, backward, ctx or {}))
        return out

    # -- graph inputs ------------------------------------------------------

    def constant(self, data) -> Value:
        """Wrap an array as a leaf that receives no gradient."""
        return Value(_as4d(data))

    def leaf(self, data) -> Value:
        """Wrap an array as a differentiable leaf (gradient retrievable)."""
        v = Value(_as4d(data))
        self.records.append(OpRecord("leaf", (), v, lambda g, ctx: ()))
        return v

    # -- operations --------------------------------------------------------

    def conv2d(self, x: Value, weight: Parameter, bias: Parameter) -> Value:
        """Same-padded stride-1 convolution; weight is (c_out, c_in, k, k)."""
        xd = _as4d(x.data)
        w = weight.data
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
            raise ShapeError(f"weight must be (c_out, c_in, k, k) with k odd, got {w.shape}")
        if w.shape[1] != xd.shape[1]:
            raise ShapeError(
                f"conv2d channel mismatch: input shape {xd.shape} vs weight shape {w.shape}")
        if bias.data.shape != (w.shape[0],):
            raise ShapeError(
                f"bias shape {bias.data.shape} does not match c_out={w.shape[0]}")
        out, cols = _conv2d_raw(xd, w, bias.data, return_cols=True)

        def backward(grad_out, ctx):
            gx, gw, gb = _conv2d_backward_raw(grad_out, ctx["x"], ctx["w"],
                                              cols=ctx["cols"])
            return gx, gw, gb

        return self._push("conv2d", (x, weight, bias), out, backward,
                          {"x": xd, "w": w, "cols": cols})

    def batchnorm(self, x: Value, scale: Parameter, shift: Parameter,
                  state: BatchNormState, mode: str = "train") -> Value:
        """Per-channel normalization; train mode also updates running stats."""
        xd = _as4d(x.data)
        c = xd.shape[1]
        if scale.data.shape != (c,) or shift.data.shape != (c,):
            raise ShapeError(
                f"scale/shift must have length {c}, got {scale.data.shape}/{shift.data.shape}")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        eps = state.eps
        if mode == "train":
            mean = xd.mean(axis=(0, 2, 3))
            var = xd.var(axis=(0, 2, 3))
            m = state.momentum
            state.running_mean[:] = m * state.running_mean + (1 - m) * mean
            state.running_var[:] = m * state.running_var + (1 - m) * var
            state.initialized = True
        else:
            if not state.initialized:
                raise RuntimeError(
                    "batchnorm eval mode before any train step; running stats "
                    "are uninitialized")
            mean = state.running_mean.astype(xd.dtype)
            var = state.running_var.astype(xd.dtype)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mean[None, :, None, None]) * invstd[None, :, None, None]
        out = scale.data[None, :, None, None] * xhat + shift.data[None, :, None, None]

        def backward(grad_out, ctx):
            xh = ctx["xhat"]
            istd = ctx["invstd"][None, :, None, None]
            gamma = ctx["gamma"][None, :, None, None]
            dgamma = (grad_out * xh).sum(axis=(0, 2, 3))
            dbeta = grad_out.sum(axis=(0, 2, 3))
            dxhat = grad_out * gamma
            if ctx["mode"] == "train":
                n = xh.shape[0] * xh.shape[2] * xh.shape[3]
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xh).sum(axis=(0, 2, 3), keepdims=True)
                dx = istd / n * (n * dxhat - s1 - xh * s2)
            else:
                dx = dxhat * istd
            return dx, dgamma, dbeta

        return self._push("batchnorm", (x, scale, shift), out, backward,
                          {"xhat": xhat, "invstd": invstd, "gamma": scale.data,
                           "mode": mode})

    def relu(self, x: Value) -> Value:
        out = np.maximum(x.data, 0)

        def backward(grad_out, ctx):
            return (grad_out * (ctx["x"] > 0),)

        return self._push("relu", (x,), out, backward, {"x": x.data})

    def add(self, a: Value, b: Value) -> Value:
        if a.data.shape != b.data.shape:
            raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
        out = a.data + b.data

        def backward(grad_out, ctx):
            return grad_out, grad_out

        return self._push("add", (a, b), out, backward)

    def median(self, x: Value, kernel_size: int = 3) -> Value:
        """Median layer: per-channel k x k window median with argmedian routing."""
        xd = _as4d(x.data)
        out, idx = median_ops.median_layer_forward(xd, kernel_size)

        def backward(grad_out, ctx):
            gx = median_ops.median_layer_backward(grad_out, ctx["idx"],
                                                  ctx["shape"], ctx["k"])
            return (gx,)

        return self._push("median", (x,), out, backward,
                          {"idx": idx, "shape": xd.shape, "k": kernel_size})

    def mse_loss(self, pred: Value, target: Value) -> Value:
        if pred.data.shape != target.data.shape:
            raise ShapeError(
                f"mse_loss shape mismatch: {pred.data.shape} vs {target.data.shape}")
        diff = pred.data - target.data
        out = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)

        def backward(grad_out, ctx):
            d = ctx["diff"]
            g = grad_out * 2.0 * d / d.size
            return g, -g

        return self._push("mse", (pred, target), out, backward, {"diff": diff})

    def sum(self, x: Value) -> Value:
        out = np.asarray(x.data.sum(), dtype=x.data.dtype)

        def backward(grad_out, ctx):
            return (np.full(ctx["shape"], grad_out, dtype=ctx["dtype"]),)

        return self._push("sum", (x,), out, backward,
                          {"shape": x.data.shape, "dtype": x.data.dtype})

    # -- reverse pass ------------------------------------------------------

    def backward(self, loss: Value) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(input) for everything reachable from ``loss``.

        Parameter gradients are added into their persistent ``grad`` buffers.
        Returns a map from value id to gradient array (useful for leaves).
        """
        if np.ndim(loss.data) != 0:
            raise ValueError(f"loss must be a scalar, got shape {np.shape(loss.data)}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones((), dtype=loss.data.dtype)}
        for rec in reversed(self.records):
            g = grads.get(rec.output.id)
            if g is None or not rec.inputs:
                continue
            input_grads = rec.backward(g, rec.ctx)
            for inp, gi in zip(rec.inputs, input_grads):
                if gi is None:
                    continue
                acc = grads.get(inp.id)
                if acc is None:
                    grads[inp.id] = gi.astype(inp.data.dtype, copy=True)
                else:
                    acc += gi
        for rec in self.records:
            for inp in rec.inputs:
                if isinstance(inp, Parameter) and inp.id in grads:
                    inp.grad += grads.pop(inp.id)
        return grads


# -- raw kernels (also reused by conv oracles' production side) -------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(n, c, h, w) -> (n*h*w, c*k*k) columns under zero 'same' padding."""
    n, c, h, w = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * h * w, c * k * k)


def _conv2d_raw(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                return_cols: bool = False):
    n, _, h, wd = x.shape
    c_out, c_in, k, _ = w.shape
    cols = _im2col(x, k)
    out = cols @ w.reshape(c_out, c_in * k * k).T + b
    out = np.ascontiguousarray(out.reshape(n, h, wd, c_out).transpose(0, 3, 1, 2))
    return (out, cols) if return_cols else out


def _conv2d_backward_raw(grad_out, x, w, cols=None):
    n, _, h, wd = x.shape
    c_out, c_in, k, _ = w.shape
    if grad_out.shape != (n, c_out, h, wd):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match output "
            f"shape {(n, c_out, h, wd)}")
    gmat = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(
        n * h * wd, c_out)
    if cols is None:
        cols = _im2col(x, k)
    grad_w = (gmat.T @ cols).reshape(c_out, c_in, k, k)
    grad_b = gmat.sum(axis=0)
    # grad wrt input = same-padded convolution with the flipped, transposed kernel
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_x = _conv2d_raw(grad_out, w_flip, np.zeros(c_in, dtype=grad_out.dtype))
    return grad_x, grad_w, grad_b


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element.

    Intended as a test oracle; run it in float64 or the differences drown in
    rounding noise.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad
