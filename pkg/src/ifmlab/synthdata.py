"""Synthetic multi-feature data for feature-suppression studies.

An input is the concatenation of one block per latent feature plus a nuisance
block::

    x = [s_0 * code_0[z_0] (+ jitter), ..., s_{n-1} * code_{n-1}[z_{n-1}] (+ jitter), nuisance]

``code_j`` is a fixed codebook of ``c_j`` distinct unit vectors, so the map
from latents to clean inputs is injective. The salience ``s_j`` scales how
loudly a feature speaks in input space; it is the knob standing in for a
feature being "easy" (readable at initialization) or "hard". Augmentation is
the identity with probability ``identity_aug_prob``; otherwise the nuisance
block is redrawn uniformly from [-1, 1] and Gaussian jitter is added to every
feature block. Identity-augmented inputs carry a zero nuisance block.

Continuous jitter makes collisions between augmented inputs of different
latents a probability-zero event rather than impossible.

Dataset export format (comma-separated text, one sample per row)::

    # ifmlab-dataset v1 input_dim=<D> n_features=<n>
    x0,...,x{D-1},y0,...,y{n-1}

where ``x*`` are input coordinates and ``y*`` integer feature labels.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import FormatError, UsageError
from .numerics import FLOAT, make_rng


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    cardinalities: tuple = (10, 10, 10)
    saliences: tuple = (3.0, 1.0, 0.7)
    code_dim: int = 8
    nuisance_dim: int = 8
    identity_aug_prob: float = 0.2
    jitter_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))
        object.__setattr__(self, "saliences", tuple(float(s) for s in self.saliences))
        if len(self.cardinalities) < 1:
            raise UsageError("need at least one feature")
        if len(self.saliences) != len(self.cardinalities):
            raise UsageError("one salience per feature is required")
        if any(c < 2 for c in self.cardinalities):
            raise UsageError("every feature needs cardinality >= 2")
        if any(not s > 0 for s in self.saliences):
            raise UsageError("saliences must be positive")
        if self.code_dim < 2:
            raise UsageError("code_dim must be >= 2")
        if self.nuisance_dim < 0:
            raise UsageError("nuisance_dim must be >= 0")
        if not 0.0 < self.identity_aug_prob <= 1.0:
            raise UsageError("identity_aug_prob must lie in (0, 1]")
        if self.jitter_sigma < 0:
            raise UsageError("jitter_sigma must be >= 0")

    @property
    def n_features(self) -> int:
        return len(self.cardinalities)

    @property
    def input_dim(self) -> int:
        return self.n_features * self.code_dim + self.nuisance_dim

    def feature_slice(self, j: int) -> slice:
        return slice(j * self.code_dim, (j + 1) * self.code_dim)

    @property
    def nuisance_slice(self) -> slice:
        return slice(self.n_features * self.code_dim, self.input_dim)

    def chance(self, j: int) -> float:
        return 1.0 / self.cardinalities[j]


def default_spec(seed: int = 0, **overrides) -> SyntheticDatasetSpec:
    """Three features of ten values each, decreasing salience (color/texture/shape analogue)."""
    return replace(SyntheticDatasetSpec(seed=seed), **overrides)


def two_feature_spec(seed: int = 0, **overrides) -> SyntheticDatasetSpec:
    """Two features, one loud and one quiet (digit-on-object analogue)."""
    base = SyntheticDatasetSpec(cardinalities=(10, 10), saliences=(4.0, 1.0), seed=seed)
    return replace(base, **overrides)


@dataclass
class ContrastiveBatch:
    anchor: np.ndarray
    positive: np.ndarray
    negatives: np.ndarray  # (m, input_dim)
    anchor_latent: np.ndarray  # (n_features,)
    negative_latents: np.ndarray  # (m, n_features)
    held_features: tuple = ()
    degenerate: bool = False  # every feature held: negatives share all latents with the anchor


_CODE_CACHE: dict = {}


def make_codes(spec: SyntheticDatasetSpec) -> list[np.ndarray]:
    """Per-feature codebooks: ``c_j`` distinct unit vectors in ``code_dim`` dims.

    Drawn once from ``spec.seed``; redrawn until the minimum pairwise distance
    exceeds 1e-3.
    """
    key = (spec.cardinalities, spec.code_dim, spec.seed)
    if key in _CODE_CACHE:
        return [c.copy() for c in _CODE_CACHE[key]]
    rng = make_rng(spec.seed)
    books = []
    for c in spec.cardinalities:
        while True:
            C = rng.normal(size=(c, spec.code_dim))
            C /= np.linalg.norm(C, axis=1, keepdims=True)
            diff = C[:, None, :] - C[None, :, :]
            dist = np.sqrt(np.sum(diff * diff, axis=-1))
            if np.min(dist[np.triu_indices(c, 1)]) > 1e-3:
                break
        books.append(C)
    _CODE_CACHE[key] = books
    return [c.copy() for c in books]


def sample_latents(spec: SyntheticDatasetSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` independent latent draws, uniform over each feature's values."""
    cols = [rng.integers(0, c, size=n) for c in spec.cardinalities]
    return np.stack(cols, axis=1)


def clean_inputs(spec: SyntheticDatasetSpec, Z: np.ndarray, codes=None) -> np.ndarray:
    """Unaugmented rendering ``g(z)`` of a stack of latents."""
    codes = make_codes(spec) if codes is None else codes
    Z = np.atleast_2d(np.asarray(Z))
    X = np.zeros((Z.shape[0], spec.input_dim))
    for j, (C, s) in enumerate(zip(codes, spec.saliences)):
        X[:, spec.feature_slice(j)] = s * C[Z[:, j]]
    return X


def render_many(spec, Z, rng, augment=True, codes=None) -> np.ndarray:
    """Render a stack of latents, each with an independent augmentation draw."""
    X = clean_inputs(spec, Z, codes)
    if not augment:
        return X
    n = X.shape[0]
    ident = rng.random(n) < spec.identity_aug_prob
    feat = slice(0, spec.n_features * spec.code_dim)
    jitter = rng.normal(0.0, 1.0, size=(n, spec.n_features * spec.code_dim)) * spec.jitter_sigma
    nuis = rng.uniform(-1.0, 1.0, size=(n, spec.nuisance_dim))
    keep = ~ident
    X[keep, feat] += jitter[keep]
    X[keep, spec.nuisance_slice] = nuis[keep]
    return X


def render(spec: SyntheticDatasetSpec, z, rng: np.random.Generator) -> np.ndarray:
    """One augmented input ``a(g(z))`` for a single latent sample."""
    z = np.asarray(z)
    if z.shape != (spec.n_features,):
        raise UsageError(f"latent must have {spec.n_features} entries")
    if np.any(z < 0) or np.any(z >= np.asarray(spec.cardinalities)):
        raise UsageError("latent value out of range")
    return render_many(spec, z[None, :], rng)[0]


def sample_pairs(spec, n, rng, held_features: Sequence[int] = ()):
    """``n`` positive pairs as two stacks of views plus their shared latents.

    With ``held_features``, one value per held feature is drawn and shared by
    the whole stack (the conditioned-batch law).
    """
    Z = sample_latents(spec, n, rng)
    held = tuple(sorted(set(held_features)))
    if held:
        if any(j < 0 or j >= spec.n_features for j in held):
            raise UsageError(f"held features {held} out of range")
        for j in held:
            Z[:, j] = rng.integers(0, spec.cardinalities[j])
    codes = make_codes(spec)
    X1 = render_many(spec, Z, rng, codes=codes)
    X2 = render_many(spec, Z, rng, codes=codes)
    return X1, X2, Z


def sample_batch(spec, m: int, rng) -> ContrastiveBatch:
    """Anchor and positive from one latent draw; ``m`` negatives with independent latents."""
    return sample_conditioned_batch(spec, m, (), rng)


def sample_conditioned_batch(spec, m: int, held_features, rng) -> ContrastiveBatch:
    """Like :func:`sample_batch`, but every sample shares its values on ``held_features``."""
    if m < 1:
        raise UsageError("m must be >= 1")
    held = tuple(sorted(set(held_features)))
    if any(j < 0 or j >= spec.n_features for j in held):
        raise UsageError(f"held features {held} out of range")
    Z = sample_latents(spec, m + 1, rng)
    for j in held:
        Z[:, j] = Z[0, j]
    codes = make_codes(spec)
    anchor = render_many(spec, Z[:1], rng, codes=codes)[0]
    positive = render_many(spec, Z[:1], rng, codes=codes)[0]
    negatives = render_many(spec, Z[1:], rng, codes=codes)
    return ContrastiveBatch(
        anchor,
        positive,
        negatives,
        Z[0].copy(),
        Z[1:].copy(),
        held_features=held,
        degenerate=len(held) == spec.n_features,
    )


def probe_dataset(spec, n_samples: int, rng, augment: bool = True):
    """I.i.d. rendered inputs with their latent values as per-feature labels."""
    Z = sample_latents(spec, n_samples, rng)
    return render_many(spec, Z, rng, augment=augment), Z


def sphere_latents(d: int, rng: np.random.Generator):
    """Return ``draw(n) -> (n, d)`` sampling uniformly from the unit sphere in R^d."""
    if d < 2:
        raise UsageError("sphere dimension must be >= 2")

    def draw(n: int) -> np.ndarray:
        G = rng.normal(size=(n, d))
        return G / np.linalg.norm(G, axis=1, keepdims=True)

    return draw


def export_dataset(X: np.ndarray, labels: np.ndarray, extra: dict | None = None) -> str:
    """Serialize inputs and labels as comma-separated text (see module docstring).

    ``extra`` maps additional integer column names to 1-D arrays, appended after
    the labels.
    """
    X = np.asarray(X, dtype=FLOAT)
    labels = np.atleast_2d(np.asarray(labels))
    if labels.shape[0] != X.shape[0]:
        labels = labels.T
    extra = extra or {}
    cols = [f"x{i}" for i in range(X.shape[1])] + [f"y{j}" for j in range(labels.shape[1])]
    cols += list(extra)
    out = io.StringIO()
    out.write(f"# ifmlab-dataset v1 input_dim={X.shape[1]} n_features={labels.shape[1]}\n")
    out.write(",".join(cols) + "\n")
    ex = [np.asarray(v) for v in extra.values()]
    for i in range(X.shape[0]):
        row = [repr(float(v)) for v in X[i]] + [str(int(v)) for v in labels[i]]
        row += [str(int(v[i])) for v in ex]
        out.write(",".join(row) + "\n")
    return out.getvalue()


def load_dataset(text: str):
    """Parse :func:`export_dataset` output into ``(X, labels, extra_columns)``."""
    lines = [l for l in text.splitlines() if l.strip()]
    if len(lines) < 2 or not lines[0].startswith("# ifmlab-dataset v1"):
        raise FormatError("missing dataset header")
    meta = dict(kv.split("=") for kv in lines[0].split()[3:])
    try:
        dim, nf = int(meta["input_dim"]), int(meta["n_features"])
    except (KeyError, ValueError) as exc:
        raise FormatError("malformed dataset header") from exc
    cols = lines[1].split(",")
    if cols[:dim] != [f"x{i}" for i in range(dim)]:
        raise FormatError("column header does not match input_dim")
    rows = [l.split(",") for l in lines[2:]]
    if any(len(r) != len(cols) for r in rows):
        raise FormatError("ragged dataset rows")
    try:
        X = np.array([[float(v) for v in r[:dim]] for r in rows]).reshape(len(rows), dim)
        Y = np.array([[int(v) for v in r[dim : dim + nf]] for r in rows]).reshape(len(rows), nf)
        extra = {
            name: np.array([int(r[dim + nf + k]) for r in rows])
            for k, name in enumerate(cols[dim + nf :])
        }
    except ValueError as exc:
        raise FormatError(f"non-numeric dataset entry: {exc}") from exc
    return X, Y, extra
