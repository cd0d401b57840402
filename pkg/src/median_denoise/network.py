"""Fully convolutional denoising network with median layers.

Layer order, for ``blocks = B`` and ``leading_medians = L``::

    conv(in -> F) . median*L . [block, median] * ceil(B/2) . block * (B - ceil(B/2)) . conv(F -> in)

With ``median_half=False`` all median layers vanish and the model reduces to
a plain residual (or conv-bn-relu) CNN: the ablation arm differs from the
full model only by the median layers.  The network is fully convolutional,
so any spatial input size >= the median kernel works.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .tensor import Tape, Parameter, BatchNormState

__all__ = ["NetworkConfig", "Model", "build_network", "forward",
           "save_checkpoint", "load_checkpoint", "CheckpointError"]

BLOCK_KINDS = ("residual", "conv_relu")


class CheckpointError(RuntimeError):
    """Raised for corrupt, truncated, or incompatible checkpoint files."""


@dataclass(frozen=True)
class NetworkConfig:
    blocks: int = 16
    features: int = 64
    median_kernel: int = 3
    leading_medians: int = 2
    median_half: bool = True
    in_channels: int = 3
    seed: int = 0
    block_kind: str = "residual"
    medians_on_input: bool = False
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.blocks < 2:
            raise ValueError(f"blocks must be >= 2, got {self.blocks}")
        if self.features < 1:
            raise ValueError(f"features must be >= 1, got {self.features}")
        if self.median_kernel < 3 or self.median_kernel % 2 == 0:
            raise ValueError(
                f"median_kernel must be odd and >= 3, got {self.median_kernel}")
        if self.leading_medians < 0:
            raise ValueError(
                f"leading_medians must be >= 0, got {self.leading_medians}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(
                f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "NetworkConfig":
        return cls(**json.loads(s))

    def layer_plan(self) -> list[tuple]:
        """The ordered layer descriptors the model is built from."""
        plan: list[tuple] = []
        leading = ([("median",)] * self.leading_medians) if self.median_half else []
        if self.medians_on_input:
            plan += leading
            plan.append(("conv", "conv_in"))
        else:
            plan.append(("conv", "conv_in"))
            plan += leading
        first_half = math.ceil(self.blocks / 2)
        for i in range(self.blocks):
            plan.append(("block", f"block{i}"))
            if self.median_half and i < first_half:
                plan.append(("median",))
        plan.append(("conv", "conv_out"))
        return plan


class Model:
    """Parameters, batchnorm states, and the layer plan of one network."""

    def __init__(self, config: NetworkConfig, params: dict[str, Parameter],
                 bn_states: dict[str, BatchNormState]):
        self.config = config
        self.params = params
        self.bn_states = bn_states
        self.layers = config.layer_plan()

    def parameters(self) -> list[Parameter]:
        return [self.params[name] for name in sorted(self.params)]

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def init_bn_stats(self):
        """Explicitly mark running stats usable (mean 0 / var 1) so an
        untrained model can run in eval mode."""
        for st in self.bn_states.values():
            st.initialized = True

    def predict(self, x: np.ndarray, mode: str = "eval") -> np.ndarray:
        """Forward a (n, c, h, w) array; eval mode clamps the output to [0, 1]."""
        tape = Tape()
        out = forward(self, tape.constant(x), tape, mode=mode)
        result = out.data
        if mode == "eval":
            result = np.clip(result, 0.0, 1.0)
        return result


def _he_conv(rng, c_out, c_in, k, dtype):
    std = math.sqrt(2.0 / (c_in * k * k))
    return (rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype)


def build_network(config: NetworkConfig, dtype=np.float32) -> Model:
    """Deterministically initialize a model from its config and seed."""
    rng = np.random.default_rng(config.seed)
    F, C = config.features, config.in_channels
    params: dict[str, Parameter] = {}
    bn_states: dict[str, BatchNormState] = {}

    def add_conv(name, c_out, c_in, k=3):
        params[name + ".weight"] = Parameter(_he_conv(rng, c_out, c_in, k, dtype),
                                             name + ".weight")
        params[name + ".bias"] = Parameter(np.zeros(c_out, dtype=dtype),
                                           name + ".bias")

    def add_bn(name, c):
        params[name + ".scale"] = Parameter(np.ones(c, dtype=dtype), name + ".scale")
        params[name + ".shift"] = Parameter(np.zeros(c, dtype=dtype), name + ".shift")
        bn_states[name] = BatchNormState.create(
            c, momentum=config.bn_momentum, eps=config.bn_eps, dtype=dtype)

    add_conv("conv_in", F, C)
    for i in range(config.blocks):
        add_conv(f"block{i}.conv1", F, F)
        add_bn(f"block{i}.bn1", F)
        add_conv(f"block{i}.conv2", F, F)
        add_bn(f"block{i}.bn2", F)
        if config.block_kind == "conv_relu":
            # conv-bn-relu units use a single conv; drop the unused second half
            del params[f"block{i}.conv2.weight"], params[f"block{i}.conv2.bias"]
            del params[f"block{i}.bn2.scale"], params[f"block{i}.bn2.shift"]
            del bn_states[f"block{i}.bn2"]
    add_conv("conv_out", C, F)
    return Model(config, params, bn_states)


def _block_forward(model: Model, tape: Tape, x, name: str, mode: str):
    cfg = model.config
    p = model.params
    h = tape.conv2d(x, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"])
    h = tape.batchnorm(h, p[f"{name}.bn1.scale"], p[f"{name}.bn1.shift"],
                       model.bn_states[f"{name}.bn1"], mode)
    h = tape.relu(h)
    if cfg.block_kind == "conv_relu":
        return h
    h = tape.conv2d(h, p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"])
    h = tape.batchnorm(h, p[f"{name}.bn2.scale"], p[f"{name}.bn2.shift"],
                       model.bn_states[f"{name}.bn2"], mode)
    return tape.relu(tape.add(h, x))


def forward(model: Model, x, tape: Tape, mode: str = "train"):
    """Run the layer plan on a Value already registered with ``tape``."""
    cfg = model.config
    if x.data.shape[1] != cfg.in_channels:
        raise ValueError(
            f"input has {x.data.shape[1]} channels, model expects "
            f"{cfg.in_channels}")
    h = x
    for layer in model.layers:
        if layer[0] == "conv":
            name = layer[1]
            h = tape.conv2d(h, model.params[f"{name}.weight"],
                            model.params[f"{name}.bias"])
        elif layer[0] == "median":
            h = tape.median(h, cfg.median_kernel)
        else:
            h = _block_forward(model, tape, h, layer[1], mode)
    return h


# -- checkpoint format -------------------------------------------------------
#
# magic "MDNCKPT1" | u32 version | u32 len + config json | u32 len + meta json
# | u32 tensor count | tensors.  Each tensor: u16 name len, name (utf-8),
# u8 dtype tag (0 = float32, 1 = float64), u8 ndim, ndim * u32 dims,
# little-endian raw data.  Meta json carries the step counter, batchnorm
# initialized flags, and optional optimizer scalars.

_MAGIC = b"MDNCKPT1"
_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _tensor_bytes(name: str, arr: np.ndarray) -> bytes:
    tag = 0 if arr.dtype == np.float32 else 1
    arr = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag])
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint file is truncated or corrupt")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_tensor(r: _Reader):
    (nlen,) = r.unpack("<H")
    name = r.take(nlen).decode()
    tag, ndim = r.unpack("<BB")
    if tag not in _DTYPE_TAGS:
        raise CheckpointError(f"unknown dtype tag {tag} in checkpoint")
    shape = r.unpack(f"<{ndim}I")
    dtype = _DTYPE_TAGS[tag]
    size = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(r.take(size * dtype.itemsize), dtype=dtype).reshape(shape)
    return name, arr.copy()


def save_checkpoint(model: Model, path, optimizer_state=None, step: int = 0):
    """Write a self-describing binary checkpoint; round-trip is bit-exact."""
    meta = {
        "step": int(step),
        "bn_initialized": {k: bool(v.initialized)
                           for k, v in model.bn_states.items()},
        "optimizer": None,
    }
    tensors: list[tuple[str, np.ndarray]] = []
    for name in sorted(model.params):
        tensors.append((f"param:{name}", model.params[name].data))
    for name in sorted(model.bn_states):
        st = model.bn_states[name]
        tensors.append((f"bnstat:{name}.mean", st.running_mean))
        tensors.append((f"bnstat:{name}.var", st.running_var))
    if optimizer_state is not None:
        meta["optimizer"] = optimizer_state.meta()
        for name, arr in optimizer_state.tensors():
            tensors.append((f"opt:{name}", arr))

    cfg = model.config.to_json().encode()
    mt = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(cfg)) + cfg)
        fh.write(struct.pack("<I", len(mt)) + mt)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            fh.write(_tensor_bytes(name, arr))


def load_checkpoint(path):
    """Rebuild a model (and raw extras) from a checkpoint file.

    Returns ``(model, meta, opt_tensors)`` where ``meta`` is the stored meta
    dict (including ``step`` and the optimizer scalars) and ``opt_tensors``
    maps optimizer tensor names to arrays (empty if none were saved).
    """
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(len(_MAGIC)) != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != _VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (expected {_VERSION})")
    (clen,) = r.unpack("<I")
    config = NetworkConfig.from_json(r.take(clen).decode())
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode())
    (count,) = r.unpack("<I")
    tensors = dict(_read_tensor(r) for _ in range(count))
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")

    dtype = None
    for name, arr in tensors.items():
        if name.startswith("param:"):
            dtype = arr.dtype
            break
    model = build_network(config, dtype=np.dtype(dtype or np.float32))
    for name, param in model.params.items():
        key = f"param:{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing parameter {name}")
        stored = tensors[key]
        if stored.shape != param.data.shape:
            raise CheckpointError(
                f"parameter {name} shape {stored.shape} does not match the "
                f"embedded config's {param.data.shape}")
        param.data = stored.astype(param.data.dtype, copy=True)
        param.grad = np.zeros_like(param.data)
    for name, st in model.bn_states.items():
        st.running_mean = tensors[f"bnstat:{name}.mean"].astype(
            st.running_mean.dtype, copy=True)
        st.running_var = tensors[f"bnstat:{name}.var"].astype(
            st.running_var.dtype, copy=True)
        st.initialized = bool(meta.get("bn_initialized", {}).get(name, False))
    opt_tensors = {name[len("opt:"):]: arr for name, arr in tensors.items()
                   if name.startswith("opt:")}
    return model, meta, opt_tensors
