"""Parameter store, layer blocks and the checkpoint format shared by all networks.

Networks are plain functions ``forward(params, x, train)`` that look their
weights up by name. A fresh :class:`NetworkParams` created with an ``rng``
materializes parameters on first lookup, so running a forward pass once on a
small dummy input initializes the whole network in execution order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from math import prod
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import ConvSpec, Tensor, ops
from .errors import ArchitectureChangedError, CheckpointError, ContractViolation

CKPT_MAGIC = b"FNCK"


def spec_hash(spec) -> str:
    """Stable hex digest of a spec dataclass (or any JSON-able mapping)."""
    payload = spec.to_dict() if hasattr(spec, "to_dict") else spec
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


class NetworkParams:
    def __init__(self, spec_digest: str, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        self.spec_digest = spec_digest
        self.tensors: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.dtype = np.dtype(dtype)
        self._rng = rng

    @property
    def building(self) -> bool:
        return self._rng is not None

    def freeze(self) -> "NetworkParams":
        self._rng = None
        return self

    def param(self, name: str, shape: tuple, init: str = "zeros", fan_in: int = 1) -> Tensor:
        t = self.tensors.get(name)
        if t is None:
            if not self.building:
                raise ContractViolation(f"layer {name!r}: parameter missing for this spec")
            if callable(init):
                data = init(self._rng, shape)
            elif init == "he":
                data = self._rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            elif init == "ones":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            t = self.tensors[name] = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        elif t.shape != tuple(shape):
            raise ContractViolation(f"layer {name!r}: parameter shape {t.shape} != expected {tuple(shape)}")
        return t

    def bn_stats(self, name: str, channels: int) -> dict:
        keys = {k: f"{name}.running_{k}" for k in ("mean", "var", "count")}
        if keys["mean"] not in self.buffers:
            if not self.building:
                raise ContractViolation(f"layer {name!r}: batch-norm statistics missing for this spec")
            fresh = ops.new_bn_stats(channels)
            for k, key in keys.items():
                self.buffers[key] = fresh[k]
        stats = {k: self.buffers[key] for k, key in keys.items()}
        if stats["mean"].shape != (channels,):
            raise ContractViolation(f"layer {name!r}: batch-norm width {stats['mean'].shape} != {channels}")
        return stats

    def trainable(self) -> list:
        return list(self.tensors.values())

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def state(self) -> dict:
        out = {k: t.data for k, t in self.tensors.items()}
        out.update(self.buffers)
        return out

    def astype(self, dtype) -> "NetworkParams":
        other = NetworkParams(self.spec_digest, dtype=dtype)
        for k, t in self.tensors.items():
            other.tensors[k] = Tensor(t.data.astype(dtype), requires_grad=True, name=k)
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other

    def copy(self) -> "NetworkParams":
        return self.astype(self.dtype)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def reset_bn_stats(P: NetworkParams) -> None:
    for key, buf in P.buffers.items():
        buf[...] = 1.0 if key.endswith(".running_var") else 0.0


# --- layer blocks --------------------------------------------------------------

def constant(values):
    """Initializer filling a parameter with ``values`` (broadcast to its shape)."""
    return lambda rng, shape: np.broadcast_to(np.asarray(values, dtype=np.float64), shape).copy()


def prior_logit(p: float) -> float:
    """Bias that makes a sigmoid output ``p`` before training."""
    return float(np.log(p / (1.0 - p)))


def conv_layer(P: NetworkParams, name: str, x: Tensor, cout: int, kernel: int = 3,
               stride: int = 1, padding="same", bias_init="zeros") -> Tensor:
    rank = x.ndim - 2
    spec = ConvSpec(x.shape[1], cout, (kernel,) * rank, stride, padding)
    w = P.param(f"{name}.w", spec.weight_shape, "he", fan_in=x.shape[1] * kernel ** rank)
    b = P.param(f"{name}.b", (cout,), bias_init)
    return ops.conv(x, spec, w, b)


def batch_norm_layer(P: NetworkParams, name: str, x: Tensor, train: bool) -> Tensor:
    c = x.shape[1]
    gamma = P.param(f"{name}.gamma", (c,), "ones")
    beta = P.param(f"{name}.beta", (c,))
    return ops.batch_norm(x, gamma, beta, P.bn_stats(name, c), train)


def conv_bn_relu(P: NetworkParams, name: str, x: Tensor, cout: int, train: bool,
                 kernel: int = 3) -> Tensor:
    x = conv_layer(P, f"{name}.conv", x, cout, kernel)
    return ops.relu(batch_norm_layer(P, f"{name}.bn", x, train))


def double_conv(P: NetworkParams, name: str, x: Tensor, cout: int, train: bool) -> Tensor:
    x = conv_bn_relu(P, f"{name}.0", x, cout, train)
    return conv_bn_relu(P, f"{name}.1", x, cout, train)


def up_conv(P: NetworkParams, name: str, x: Tensor, cout: int, train: bool) -> Tensor:
    """Nearest-neighbour x2 upsampling followed by a 3-wide conv block."""
    return conv_bn_relu(P, name, ops.upsample_nearest(x, 2), cout, train)


def pad_to_multiple(x: np.ndarray, multiple: int, mode: str = "constant"):
    """Pad trailing spatial axes of ``(N, C, *S)`` up to a multiple; returns (padded, crop)."""
    spatial = x.shape[2:]
    extra = [(-n) % multiple for n in spatial]
    if not any(extra):
        return x, None
    widths = [(0, 0), (0, 0)] + [(e // 2, e - e // 2) for e in extra]
    crop = (slice(None), slice(None)) + tuple(slice(lo, lo + n) for (lo, _), n in zip(widths[2:], spatial))
    return np.pad(x, widths, mode=mode), crop


# --- checkpoints -------------------------------------------------------------

def _entry_bytes(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def checkpoint_size(arrays: dict) -> int:
    """Exact byte size of a checkpoint holding ``arrays``."""
    header = 4 + 32 + 4
    return header + sum(4 + len(k.encode()) + 4 + 4 * v.ndim + 4 * v.size for k, v in arrays.items())


def save_arrays(path, digest: str, arrays: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + bytes.fromhex(digest) + struct.pack("<I", len(arrays)))
        for k in arrays:
            fh.write(_entry_bytes(k, np.asarray(arrays[k])))


def load_arrays(path, expected_digest: Optional[str] = None) -> tuple:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != CKPT_MAGIC or len(raw) < 40:
        raise CheckpointError(f"{path}: not a checkpoint file")
    digest = raw[4:36].hex()
    if expected_digest is not None and digest != expected_digest:
        raise ArchitectureChangedError(
            f"{path}: architecture changed (checkpoint spec {digest[:12]}, expected {expected_digest[:12]})")
    (count,) = struct.unpack_from("<I", raw, 36)
    pos, arrays = 40, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + n].decode()
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            size = prod(shape)
            if pos + 4 * size > len(raw):
                raise CheckpointError(f"{path}: truncated entry {name!r}")
            arrays[name] = np.frombuffer(raw, "<f4", size, pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return digest, arrays


def save_checkpoint(params: NetworkParams, path, extra: Optional[dict] = None) -> None:
    arrays = dict(params.state())
    for k, v in (extra or {}).items():
        arrays[k] = np.asarray(v, dtype=np.float32)
    save_arrays(path, params.spec_digest, arrays)


def params_from_arrays(digest: str, arrays: dict, prefix: str = "") -> NetworkParams:
    """Rebuild a parameter set from checkpoint arrays under ``prefix``."""
    params = NetworkParams(digest)
    for k, v in arrays.items():
        if not k.startswith(prefix):
            continue
        name = k[len(prefix):]
        if ".running_" in name:
            params.buffers[name] = v.copy()
        else:
            params.tensors[name] = Tensor(v.copy(), requires_grad=True, name=name)
    return params


def load_checkpoint(path, expected_digest: Optional[str] = None) -> NetworkParams:
    digest, arrays = load_arrays(path, expected_digest)
    return params_from_arrays(digest, {k: v for k, v in arrays.items() if "/" not in k})
