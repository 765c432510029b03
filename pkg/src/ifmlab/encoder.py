"""Feed-forward encoder onto the unit sphere, with exact backprop and Adam.

Checkpoint layout (all integers little-endian ``uint32``, floats little-endian
``float64``)::

    magic      8 bytes   b"IFMCKPT\\x00"
    version    uint32    currently 1
    n_layers   uint32
    per layer:
      in_dim   uint32
      out_dim  uint32
      act      uint32    0 = identity, 1 = relu
      weights  in_dim * out_dim float64, row-major, shape (in_dim, out_dim)
      bias     out_dim float64
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, FormatError, UsageError
from .numerics import FLOAT

ACTIVATIONS = ("identity", "relu")
MAGIC = b"IFMCKPT\x00"
CKPT_VERSION = 1


@dataclass
class Layer:
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=FLOAT)
        self.bias = np.asarray(self.bias, dtype=FLOAT)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise UsageError(
                f"layer shapes disagree: weights {self.weights.shape}, bias {self.bias.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self):
        return self.weights.shape[0]

    @property
    def out_dim(self):
        return self.weights.shape[1]


@dataclass
class Tape:
    """Cached activations of one forward pass."""

    inputs: list  # input to each layer
    pre: list  # pre-activation of each layer
    raw: np.ndarray  # final output before normalization
    norms: np.ndarray  # row norms of ``raw``
    out: np.ndarray  # normalized embeddings
    version: int  # encoder parameter version at forward time


class Encoder:
    """Stack of affine layers with ReLU/identity activations and an l2-normalized output."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise UsageError("encoder needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise UsageError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = layers
        self.version = 0

    @classmethod
    def init(cls, dims, rng: np.random.Generator, final_activation="identity"):
        """He-initialized MLP through ``dims`` (e.g. ``[in, 64, 64, 8]``)."""
        if len(dims) < 2:
            raise UsageError("dims needs at least input and output size")
        layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            W = rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b))
            layers.append(Layer(W, np.zeros(b), final_activation if last else "relu"))
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    @property
    def dims(self):
        return [self.in_dim] + [l.out_dim for l in self.layers]

    def params(self):
        """Flat list of parameter arrays: ``[W0, b0, W1, b1, ...]`` (live references)."""
        out = []
        for l in self.layers:
            out += [l.weights, l.bias]
        return out

    def set_params(self, arrays):
        arrays = list(arrays)
        if len(arrays) != 2 * len(self.layers):
            raise UsageError("parameter count mismatch")
        for i, l in enumerate(self.layers):
            if arrays[2 * i].shape != l.weights.shape or arrays[2 * i + 1].shape != l.bias.shape:
                raise UsageError("parameter shape mismatch")
            l.weights = np.array(arrays[2 * i], dtype=FLOAT)
            l.bias = np.array(arrays[2 * i + 1], dtype=FLOAT)
        self.version += 1

    def copy(self) -> "Encoder":
        return Encoder(
            [Layer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def forward(self, x):
        """Embed ``x`` (one input vector or a stack of rows).

        Returns ``(embeddings, tape)`` with unit-norm embeddings of the same
        leading shape as ``x``.
        """
        X = np.asarray(x, dtype=FLOAT)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise UsageError(f"input has shape {np.shape(x)}, encoder expects dim {self.in_dim}")
        inputs, pre = [], []
        h = X
        for l in self.layers:
            inputs.append(h)
            z = h @ l.weights + l.bias
            pre.append(z)
            h = np.maximum(z, 0.0) if l.activation == "relu" else z
        norms = np.sqrt(np.sum(h * h, axis=1))
        if np.any(norms == 0.0):
            raise DegenerateInputError("encoder output is zero before normalization")
        out = h / norms[:, None]
        tape = Tape(inputs, pre, h, norms, out, self.version)
        return (out[0] if single else out), tape

    def embed(self, x) -> np.ndarray:
        return self.forward(x)[0]

    __call__ = embed

    def raw(self, x):
        """Unnormalized outputs and tape (for the pre-normalization objective)."""
        emb, tape = self.forward(x)
        r = tape.raw
        return (r[0] if np.ndim(x) == 1 else r), tape

    def backward(self, tape: Tape, d_embedding=None, d_raw=None):
        """Backpropagate an embedding gradient through the network.

        Pass ``d_embedding`` (gradient w.r.t. the normalized output) or
        ``d_raw`` (gradient w.r.t. the output before normalization).
        Returns ``(param_grads, d_input)`` with ``param_grads`` aligned to
        :meth:`params`.
        """
        if tape.version != self.version:
            raise UsageError("stale tape: parameters changed since the forward pass")
        if (d_embedding is None) == (d_raw is None):
            raise UsageError("pass exactly one of d_embedding or d_raw")
        single = np.ndim(d_embedding if d_raw is None else d_raw) == 1
        if d_raw is None:
            G = np.asarray(d_embedding, dtype=FLOAT).reshape(tape.out.shape)
            u = tape.out
            # Jacobian of z -> z/|z| is (I - u u^T)/|z|
            G = (G - u * np.sum(u * G, axis=1, keepdims=True)) / tape.norms[:, None]
        else:
            G = np.asarray(d_raw, dtype=FLOAT).reshape(tape.raw.shape)
        grads = [None] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            l = self.layers[i]
            if l.activation == "relu":
                G = G * (tape.pre[i] > 0.0)
            grads[2 * i] = tape.inputs[i].T @ G
            grads[2 * i + 1] = G.sum(axis=0)
            G = G @ l.weights.T
        return grads, (G[0] if single else G)


def forward(enc: Encoder, x):
    return enc.forward(x)


def backward(enc: Encoder, tape: Tape, d_embedding):
    return enc.backward(tape, d_embedding)


@dataclass
class Adam:
    """Adam with bias correction and decoupled multiplicative weight decay."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    weight_decay: float = 1e-6
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        """Update ``params`` in place."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
            raise UsageError("gradient shapes do not match parameters")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps_hat)


def adam_step(state: Adam, enc: Encoder, grads):
    """Apply one Adam update to ``enc``'s parameters."""
    state.step(enc.params(), grads)
    enc.version += 1


def save_checkpoint(enc: Encoder) -> bytes:
    parts = [MAGIC, struct.pack("<II", CKPT_VERSION, len(enc.layers))]
    for l in enc.layers:
        parts.append(struct.pack("<III", l.in_dim, l.out_dim, ACTIVATIONS.index(l.activation)))
        parts.append(np.ascontiguousarray(l.weights, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(l.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def load_checkpoint(data: bytes) -> Encoder:
    buf = memoryview(data)
    if len(buf) < len(MAGIC) + 8 or bytes(buf[: len(MAGIC)]) != MAGIC:
        raise FormatError("not an encoder checkpoint (bad magic)")
    off = len(MAGIC)
    version, n_layers = struct.unpack_from("<II", buf, off)
    off += 8
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    layers = []
    try:
        for _ in range(n_layers):
            a, b, act = struct.unpack_from("<III", buf, off)
            off += 12
            if act >= len(ACTIVATIONS):
                raise FormatError(f"unknown activation code {act}")
            nw, nb = a * b * 8, b * 8
            if off + nw + nb > len(buf):
                raise FormatError("truncated checkpoint")
            W = np.frombuffer(buf[off : off + nw], dtype="<f8").reshape(a, b).astype(FLOAT)
            off += nw
            bias = np.frombuffer(buf[off : off + nb], dtype="<f8").astype(FLOAT)
            off += nb
            layers.append(Layer(W, bias, ACTIVATIONS[act]))
    except struct.error as exc:
        raise FormatError("truncated checkpoint") from exc
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after checkpoint")
    try:
        return Encoder(layers)
    except UsageError as exc:
        raise FormatError(str(exc)) from exc
