"""Differentiable layers: temporal 1D convolution, affine maps, and the
bidirectional LSTM used for temporal feature encoding.

Parameters are plain `Tensor`s initialized uniformly in [-s, s] with
s = 1/sqrt(fan_in) from a caller-supplied numpy Generator, so runs are
reproducible from a single seed.

Checkpoint file layout ("TALW"): 4-byte magic, u32 version, then one
record per parameter -- u32 name length, UTF-8 name, u32 rank, u32
extents, row-major little-endian float64 payload.  Records are written
in sorted name order and round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, ShapeError, concat, flip0, matmul, relu,
                     reshape, sigmoid, tanh, transpose)

ACTIVATIONS = ("none", "relu", "sigmoid")


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def _apply_activation(x: Tensor, activation: str) -> Tensor:
    if activation == "none":
        return x
    if activation == "relu":
        return relu(x)
    if activation == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {activation!r}")


# ----------------------------------------------------------------------
# temporal 1D convolution

@dataclass
class Conv1dParams:
    weight: Tensor          # [C_out, C_in, k]
    bias: Tensor            # [C_out]
    padding: int
    activation: str = "none"

    def __post_init__(self):
        c_out, c_in, k = self.weight.shape
        if min(c_out, c_in, k) < 1:
            raise ValueError("conv1d extents must all be >= 1")
        if self.bias.shape != (c_out,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({c_out},)")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def create(cls, rng: np.random.Generator, c_in: int, c_out: int, k: int,
               padding: int | str = "same", activation: str = "none") -> "Conv1dParams":
        if padding == "same":
            if k % 2 == 0:
                raise ValueError("'same' padding requires an odd kernel size")
            padding = (k - 1) // 2
        weight = Tensor(uniform_init(rng, (c_out, c_in, k), c_in * k), requires_grad=True)
        bias = Tensor(np.zeros(c_out), requires_grad=True)
        return cls(weight, bias, int(padding), activation)

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def conv1d(x: Tensor, p: Conv1dParams) -> Tensor:
    """Cross-correlate a [C_in x T] sequence down to [C_out x T'] with
    T' = T + 2*padding - k + 1, add bias, apply the configured activation."""
    w, b = p.weight, p.bias
    c_out, c_in, k = w.shape
    if x.ndim != 2 or x.shape[0] != c_in:
        raise ShapeError(f"conv1d input has shape {x.shape}, expected ({c_in}, T)")
    t_in = x.shape[1]
    pad = p.padding
    t_out = t_in + 2 * pad - k + 1
    if t_out < 1:
        raise ShapeError(f"conv1d output would be empty: T={t_in}, k={k}, padding={pad}")

    xp = np.pad(x.data, ((0, 0), (pad, pad))) if pad else x.data
    out = np.broadcast_to(b.data[:, None], (c_out, t_out)).copy()
    for j in range(k):
        out += w.data[:, :, j] @ xp[:, j:j + t_out]

    need_x, need_w, need_b = x.requires_grad, w.requires_grad, b.requires_grad

    def backward(g):
        gx = gw = gb = None
        if need_x:
            gxp = np.zeros((c_in, t_in + 2 * pad))
            for j in range(k):
                gxp[:, j:j + t_out] += w.data[:, :, j].T @ g
            gx = gxp[:, pad:pad + t_in] if pad else gxp
        if need_w:
            gw = np.empty_like(w.data)
            for j in range(k):
                gw[:, :, j] = g @ xp[:, j:j + t_out].T
        if need_b:
            gb = g.sum(axis=1)
        return (gx, gw, gb)

    lin = Tensor._from_op(out, (x, w, b), backward)
    return _apply_activation(lin, p.activation)


# ----------------------------------------------------------------------
# affine map

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map over the trailing axis: [... x D] -> [... x E]."""
    d, e = weight.shape
    if x.shape[-1] != d:
        raise ShapeError(f"linear input extent {x.shape[-1]} != weight extent {d}")
    if x.ndim == 1:
        return reshape(matmul(reshape(x, (1, d)), weight) + bias, (e,))
    if x.ndim == 2:
        return matmul(x, weight) + bias
    raise ShapeError(f"linear expects rank 1 or 2 input, got shape {x.shape}")


def linear_params(rng: np.random.Generator, d: int, e: int,
                  zero: bool = False) -> tuple[Tensor, Tensor]:
    w = np.zeros((d, e)) if zero else uniform_init(rng, (d, e), d)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(e), requires_grad=True)


# ----------------------------------------------------------------------
# bidirectional LSTM

@dataclass
class BiLstmParams:
    """Gate weights for both directions.

    Each direction packs the four gates row-wise in the fixed order
    (input, forget, cell, output): W [4H x D], U [4H x H], b [4H].
    """

    w_fwd: Tensor
    u_fwd: Tensor
    b_fwd: Tensor
    w_bwd: Tensor
    u_bwd: Tensor
    b_bwd: Tensor

    def __post_init__(self):
        fh, d = self.w_fwd.shape
        if fh % 4 != 0:
            raise ShapeError(f"gate weight leading extent {fh} is not 4*H")
        h = fh // 4
        expect = {"w": (4 * h, d), "u": (4 * h, h), "b": (4 * h,)}
        for tag, fwd_t, bwd_t in (("w", self.w_fwd, self.w_bwd),
                                  ("u", self.u_fwd, self.u_bwd),
                                  ("b", self.b_fwd, self.b_bwd)):
            if fwd_t.shape != expect[tag] or bwd_t.shape != expect[tag]:
                raise ShapeError(
                    f"{tag} blocks must both have shape {expect[tag]}, got "
                    f"{fwd_t.shape} and {bwd_t.shape}")

    @property
    def hidden_size(self) -> int:
        return self.w_fwd.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.w_fwd.shape[1]

    @classmethod
    def create(cls, rng: np.random.Generator, d: int, h: int) -> "BiLstmParams":
        def block():
            return (Tensor(uniform_init(rng, (4 * h, d), d), requires_grad=True),
                    Tensor(uniform_init(rng, (4 * h, h), h), requires_grad=True),
                    Tensor(np.zeros(4 * h), requires_grad=True))

        wf, uf, bf = block()
        wb, ub, bb = block()
        return cls(wf, uf, bf, wb, ub, bb)

    def tensors(self) -> dict[str, Tensor]:
        return {"w_fwd": self.w_fwd, "u_fwd": self.u_fwd, "b_fwd": self.b_fwd,
                "w_bwd": self.w_bwd, "u_bwd": self.u_bwd, "b_bwd": self.b_bwd}


def _lstm_direction(x: Tensor, w: Tensor, u: Tensor, b: Tensor, h_size: int) -> Tensor:
    """One direction over [T x D]; zero initial hidden/cell state."""
    t_len = x.shape[0]
    wt = transpose(w)
    ut = transpose(u)
    h = Tensor(np.zeros((1, h_size)))
    c = Tensor(np.zeros((1, h_size)))
    outs = []
    for t in range(t_len):
        z = matmul(x[t:t + 1], wt) + matmul(h, ut) + b
        i_gate = sigmoid(z[:, 0:h_size])
        f_gate = sigmoid(z[:, h_size:2 * h_size])
        g_gate = tanh(z[:, 2 * h_size:3 * h_size])
        o_gate = sigmoid(z[:, 3 * h_size:4 * h_size])
        c = f_gate * c + i_gate * g_gate
        h = o_gate * tanh(c)
        outs.append(h)
    return concat(outs, axis=0)


def bilstm(x: Tensor, p: BiLstmParams) -> Tensor:
    """[T x D] -> [T x 2H]; row t is [forward h_t, backward h_t]."""
    if x.ndim != 2 or x.shape[1] != p.input_size:
        raise ShapeError(f"bilstm input has shape {x.shape}, expected (T, {p.input_size})")
    if x.shape[0] < 1:
        raise ShapeError("bilstm needs at least one time step")
    h = p.hidden_size
    fwd = _lstm_direction(x, p.w_fwd, p.u_fwd, p.b_fwd, h)
    bwd = flip0(_lstm_direction(flip0(x), p.w_bwd, p.u_bwd, p.b_bwd, h))
    return concat([fwd, bwd], axis=1)


# ----------------------------------------------------------------------
# checkpoint files

CHECKPOINT_MAGIC = b"TALW"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: dict[str, Tensor], path) -> None:
    """Write parameters in sorted name order; byte-deterministic."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype="<f8")
            raw_name = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated payload at offset {off}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    params: dict[str, np.ndarray] = {}
    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        params[name] = data.astype(np.float64)
    return params
