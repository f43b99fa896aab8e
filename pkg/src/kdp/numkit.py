"""Dense feedforward networks with hand-written reverse mode and Adam.

Arrays are plain numpy ``ndarray`` objects (float32 by default). A network is
a fixed chain of affine layers with tanh on every hidden layer and identity on
the output. Nothing here builds a general computation graph: the only thing we
ever differentiate is this chain.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ShapeError,
    StateError,
    TrainingError,
    TruncatedFileError,
    VersionMismatchError,
)

CHECKPOINT_MAGIC = b"KDPN"
CHECKPOINT_VERSION = 1


@dataclass
class GradientTape:
    """Primal values recorded by :meth:`FeedForwardNet.forward_tape`.

    ``inputs[l]`` is the input to layer ``l`` and ``outputs[l]`` its
    post-activation output. ``grads`` is filled by ``backward`` in the same
    flat order as :attr:`FeedForwardNet.params`.
    """

    net_id: int
    sizes: tuple
    inputs: list
    outputs: list
    grads: list = field(default_factory=list)


class FeedForwardNet:
    def __init__(self, sizes, weights, biases, dtype=np.float32):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2:
            raise ShapeError("a network needs at least an input and an output size")
        if len(weights) != len(sizes) - 1 or len(biases) != len(sizes) - 1:
            raise ShapeError("one weight matrix and bias per layer expected")
        self.sizes = sizes
        self.dtype = np.dtype(dtype)
        self.weights = [np.ascontiguousarray(w, dtype=self.dtype) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=self.dtype) for b in biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[l], sizes[l + 1]) or b.shape != (sizes[l + 1],):
                raise ShapeError(
                    f"layer {l}: expected W{(sizes[l], sizes[l + 1])}, b({sizes[l + 1]},), "
                    f"got {w.shape}, {b.shape}"
                )

    @classmethod
    def init(cls, sizes, rng, dtype=np.float32, output_scale=1.0):
        """Glorot-uniform weights (last layer times ``output_scale``), zero biases."""
        weights, biases = [], []
        n = len(sizes) - 1
        for l, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            if l == n - 1:
                limit *= output_scale
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(sizes, weights, biases, dtype=dtype)

    @classmethod
    def zeros(cls, sizes, dtype=np.float32):
        weights = [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(b) for b in sizes[1:]]
        return cls(sizes, weights, biases, dtype=dtype)

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    @property
    def n_layers(self):
        return len(self.weights)

    def copy(self):
        return FeedForwardNet(self.sizes, [w.copy() for w in self.weights],
                              [b.copy() for b in self.biases], dtype=self.dtype)

    def astype(self, dtype):
        return FeedForwardNet(self.sizes, self.weights, self.biases, dtype=dtype)

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ShapeError(f"expected input (rows, {self.sizes[0]}), got {x.shape}")
        return x

    def forward(self, x):
        h = self._check_input(x)
        last = self.n_layers - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if l < last:
                h = np.tanh(h)
        return h

    def forward_tape(self, x):
        h = self._check_input(x)
        inputs, outputs = [], []
        last = self.n_layers - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ w + b
            if l < last:
                h = np.tanh(h)
            outputs.append(h)
        return h, GradientTape(id(self), self.sizes, inputs, outputs)

    def backward(self, tape, output_grad):
        """Reverse pass; populates ``tape.grads`` and returns the tape.

        ``output_grad`` is the cotangent dL/d(output) with the output's shape.
        """
        if tape.net_id != id(self) or tape.sizes != self.sizes:
            raise StateError("gradient tape was recorded by a different network")
        g = np.asarray(output_grad, dtype=self.dtype)
        if g.shape != tape.outputs[-1].shape:
            raise ShapeError(f"output_grad {g.shape} != output {tape.outputs[-1].shape}")
        grads = [None] * (2 * self.n_layers)
        for l in range(self.n_layers - 1, -1, -1):
            if l < self.n_layers - 1:
                g = g * (1.0 - tape.outputs[l] ** 2)
            grads[2 * l] = tape.inputs[l].T @ g
            grads[2 * l + 1] = g.sum(axis=0)
            if l > 0:
                g = g @ self.weights[l].T
        tape.grads = grads
        return tape


def forward(net, x):
    return net.forward(x)


def backward(net, tape, output_grad):
    return net.backward(tape, output_grad)


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = None
    v: list = None


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(
                f"non-finite gradient in parameter {i}",
                {"param_index": i, "n_nonfinite": int(np.size(g) - np.isfinite(g).sum()),
                 "step": state.step},
            )
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


def save_net(path, net):
    """Write ``net`` in the KDPN checkpoint format (little-endian, CRC32 trailer)."""
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<II", CHECKPOINT_VERSION, len(net.sizes))
    body += struct.pack(f"<{len(net.sizes)}I", *net.sizes)
    for p in net.params:
        body += np.ascontiguousarray(p, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def load_net(path):
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    version, n_sizes = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    offset = 12
    if len(raw) < offset + 4 * n_sizes:
        raise TruncatedFileError(f"{path}: layer-size list truncated")
    sizes = struct.unpack_from(f"<{n_sizes}I", raw, offset)
    offset += 4 * n_sizes
    n_floats = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if len(raw) != offset + 4 * n_floats + 4:
        raise TruncatedFileError(
            f"{path}: expected {offset + 4 * n_floats + 4} bytes, found {len(raw)}")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    flat = np.frombuffer(raw, dtype="<f4", count=n_floats, offset=offset).astype(np.float32)
    weights, biases, k = [], [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[k:k + a * b].reshape(a, b))
        k += a * b
        biases.append(flat[k:k + b])
        k += b
    return FeedForwardNet(sizes, weights, biases)
