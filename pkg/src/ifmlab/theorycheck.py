"""Empirical checks of the feature-suppression statements.

Two settings:

* A continuous model where each of ``n_features`` latents is uniform on the
  sphere ``S^{d-1}`` and augmentations only touch a nuisance block. An encoder
  that outputs one feature's latent is perfectly aligned and uniform, so two
  encoders keyed to different features reach the same limiting loss while
  disagreeing completely on what they can read out.
* The discrete synthetic data, where training with negatives that share a
  feature value should leave that feature unreadable.

Both report estimates and whether they are consistent with the predictions;
Monte Carlo is never proof.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate, special

from .errors import UsageError
from .evaluation import (
    LimitingLossEstimate,
    ProbeResult,
    collapse_unif,
    limiting_loss,
    readout,
    split_indices,
    suppression_score,
    train_probe,
)
from .losses import LossConfig
from .numerics import FLOAT, make_rng
from .training import TrainSettings, train_encoder


@dataclass(frozen=True)
class SphereFeatureModel:
    """``n_features`` independent latents uniform on ``S^{d-1}``, concatenated.

    Augmentation redraws a ``nuisance_dim`` block uniformly from [-1, 1] and
    leaves every feature block untouched.
    """

    n_features: int = 2
    d: int = 2
    nuisance_dim: int = 0

    def __post_init__(self):
        if self.n_features < 1:
            raise UsageError("need at least one feature")
        if self.d < 2:
            raise UsageError("sphere dimension must be >= 2")
        if self.nuisance_dim < 0:
            raise UsageError("nuisance_dim must be >= 0")

    @property
    def input_dim(self) -> int:
        return self.n_features * self.d + self.nuisance_dim

    def block(self, X, j: int) -> np.ndarray:
        return np.asarray(X)[..., j * self.d : (j + 1) * self.d]

    def latents(self, n: int, rng) -> np.ndarray:
        G = rng.normal(size=(n, self.n_features, self.d))
        return G / np.linalg.norm(G, axis=-1, keepdims=True)

    def _render(self, Z, rng) -> np.ndarray:
        n = Z.shape[0]
        nuis = rng.uniform(-1.0, 1.0, size=(n, self.nuisance_dim))
        return np.concatenate([Z.reshape(n, -1), nuis], axis=1)

    def sample(self, n: int, rng) -> np.ndarray:
        return self._render(self.latents(n, rng), rng)

    def sample_pairs(self, n: int, rng):
        Z = self.latents(n, rng)
        return self._render(Z, rng), self._render(Z, rng)


@dataclass(frozen=True)
class OracleEncoder:
    """Hand-built encoder that outputs exactly one feature's latent."""

    model: SphereFeatureModel
    feature: int

    def __call__(self, X) -> np.ndarray:
        return np.array(self.model.block(X, self.feature), dtype=FLOAT)


@dataclass(frozen=True)
class CollapseEncoder:
    """Maps every input to the same unit vector."""

    dim: int

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.zeros((X.shape[0], self.dim))
        out[:, 0] = 1.0
        return out


def build_oracle(model: SphereFeatureModel, target: int, mode: str) -> OracleEncoder:
    """Encoder that distinguishes ``target`` or suppresses it by reading another feature."""
    if not 0 <= target < model.n_features:
        raise UsageError(f"feature {target} out of range")
    if mode == "distinguish":
        return OracleEncoder(model, target)
    if mode == "suppress":
        if model.n_features < 2:
            raise UsageError("suppression needs a second feature to encode instead")
        return OracleEncoder(model, (target + 1) % model.n_features)
    raise UsageError(f"mode must be 'distinguish' or 'suppress', got {mode!r}")


def sphere_unif(d: int, tau: float) -> float:
    """``log E exp(u.w / tau)`` for independent uniform ``u, w`` on ``S^{d-1}``.

    For ``d = 2`` this is ``log I_0(1/tau)``; otherwise the inner product has
    density proportional to ``(1 - s^2)^{(d-3)/2}`` on [-1, 1].
    """
    if d == 2:
        x = 1.0 / tau
        return float(np.log(special.i0e(x)) + x)
    k = (d - 3) / 2.0
    c = 1.0 / tau
    num, _ = integrate.quad(lambda s: (1 - s * s) ** k * math.exp(c * (s - 1.0)), -1.0, 1.0)
    den, _ = integrate.quad(lambda s: (1 - s * s) ** k, -1.0, 1.0)
    return float(c + math.log(num / den))


def angle_bins(U, n_bins: int = 8) -> np.ndarray:
    """Discretize 2-D unit vectors into ``n_bins`` equal angular sectors."""
    U = np.asarray(U)
    theta = np.arctan2(U[:, 1], U[:, 0]) + math.pi
    return np.minimum((theta / (2 * math.pi) * n_bins).astype(int), n_bins - 1)


def probe_feature_bins(enc, model: SphereFeatureModel, feature: int, rng, n: int = 4000, n_bins: int = 8):
    """Linear-probe accuracy for the angular bin of one 2-D latent feature."""
    if model.d != 2:
        raise UsageError("angular bins are defined for d = 2")
    X = model.sample(n, rng)
    y = angle_bins(model.block(X, feature), n_bins)
    E = np.asarray(enc(X), dtype=FLOAT)
    tr, te = split_indices(n, rng)
    probe = train_probe(E[tr], y[tr], n_bins)
    return probe.accuracy(E[te], y[te])


@dataclass
class Prop1Report:
    tau: float
    analytic_unif: float
    suppress: LimitingLossEstimate
    distinguish: LimitingLossEstimate
    collapse: LimitingLossEstimate
    suppress_acc: float
    distinguish_acc: float
    chance: float

    @property
    def loss_gap(self) -> float:
        return abs(self.suppress.total - self.distinguish.total)

    @property
    def loss_gap_se(self) -> float:
        return math.hypot(self.suppress.total_se, self.distinguish.total_se)

    @property
    def consistent(self) -> bool:
        """Equal losses within 2 SE, both at the analytic value, and a clear readout gap."""
        near = all(
            abs(e.total - self.analytic_unif) <= 2 * e.total_se + 1e-12
            for e in (self.suppress, self.distinguish)
        )
        readout_gap = (
            math.isnan(self.distinguish_acc) or self.distinguish_acc - self.suppress_acc >= 0.5
        )
        return (
            self.loss_gap <= 2 * self.loss_gap_se
            and near
            and readout_gap
            and self.collapse.total > self.distinguish.total
        )

    def lines(self) -> list[str]:
        return [
            f"analytic limiting loss      {self.analytic_unif:.6f}",
            f"suppressing encoder         {self.suppress.total:.6f} +/- {self.suppress.total_se:.6f}",
            f"distinguishing encoder      {self.distinguish.total:.6f} +/- {self.distinguish.total_se:.6f}",
            f"collapsed encoder           {self.collapse.total:.6f}",
            f"probe acc (suppress/dist.)  {self.suppress_acc:.3f} / {self.distinguish_acc:.3f}"
            f"  (chance {self.chance:.3f})",
        ]


def prop1_check(d: int = 2, n_mc: int = 100_000, tau: float = 1.0, seed: int = 0, feature: int = 0):
    """Compare an encoder that keeps ``feature`` with one that drops it."""
    model = SphereFeatureModel(n_features=2, d=d)
    rng = make_rng(seed)
    sup = build_oracle(model, feature, "suppress")
    dis = build_oracle(model, feature, "distinguish")
    est = {}
    for name, enc in (("s", sup), ("d", dis), ("c", CollapseEncoder(d))):
        est[name] = limiting_loss(enc, model, n_mc, tau, rng)
    if d == 2:
        acc_s = probe_feature_bins(sup, model, feature, rng)
        acc_d = probe_feature_bins(dis, model, feature, rng)
        chance = 1.0 / 8
    else:
        acc_s = acc_d = chance = float("nan")
    return Prop1Report(tau, sphere_unif(d, tau), est["s"], est["d"], est["c"], acc_s, acc_d, chance)


@dataclass
class Prop2Report:
    held: tuple
    results: list = field(default_factory=list)  # ProbeResult per seed

    def scores(self, j: int) -> list[float]:
        return [suppression_score(r, j) for r in self.results]

    def _mean_scores(self, features) -> list[float]:
        if not features:
            return [float("nan")] * len(self.results)
        return [float(np.mean([suppression_score(r, j) for j in features])) for r in self.results]

    def held_scores(self) -> list[float]:
        """Per-seed mean score over the held features (NaN for the empty control)."""
        return self._mean_scores(self.held)

    def complement_scores(self) -> list[float]:
        n = len(self.results[0].accuracy)
        return self._mean_scores([j for j in range(n) if j not in self.held])


def prop2_check(
    spec,
    held: Sequence[int],
    loss_cfg: LossConfig | None = None,
    settings: TrainSettings | None = None,
    seeds: Sequence[int] = (0, 1, 2),
) -> Prop2Report:
    """Train with batches whose negatives share ``held`` values, then probe every feature.

    An empty ``held`` is the unconditioned control run.
    """
    held = tuple(sorted(set(held)))
    if len(held) == spec.n_features:
        raise UsageError("holding every feature leaves nothing to contrast")
    loss_cfg = loss_cfg or LossConfig(tau=0.5, alpha=0.0)
    base = settings or TrainSettings()
    settings = TrainSettings(**{**base.__dict__, "held_features": held})
    rep = Prop2Report(held)
    for seed in seeds:
        enc = train_encoder(spec, loss_cfg, settings, seed).encoder
        rep.results.append(readout(enc, spec, make_rng(100 + seed)))
    return rep
