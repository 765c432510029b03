"""Contrastive objectives and their gradients.

Pointwise functions take an :class:`EmbeddingBatch` (one anchor, one
positive, ``m`` negatives). The ``nt_xent_*`` functions evaluate the same
objectives over a whole minibatch of positive pairs, using every other view in
the minibatch as a negative, and are what the trainer calls.

Variants of the perturbed loss:

``standard``
    Logit shift: the positive logit drops by ``eps_pos/tau`` and every negative
    logit rises by ``eps_i/tau``. Perturbed embeddings leave the sphere.
``post_norm``
    Same perturbation, then every perturbed vector is projected back onto the
    unit sphere before scoring.
``pre_norm``
    The encoder's raw (unnormalized) outputs are perturbed inside l2 balls and
    scored with cosine similarity. No closed form; the worst case is found by
    projected ascent.

Hardness weighting replaces each negative term ``exp(s_i/tau)`` by
``w_i * exp(s_i/tau)`` with ``w_i = m * softmax(beta * s)_i``. This is an
in-loss importance reweighting, an approximation of hard-negative sampling
rather than a resampler; ``beta = 0`` recovers plain InfoNCE exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, UsageError
from .numerics import (
    FLOAT,
    as_matrix,
    as_vector,
    dot,
    log_sum_exp,
    log_sum_exp_rows,
    softmax_rows,
)

VARIANTS = ("standard", "post_norm", "pre_norm")
UNIT_TOL = 1e-9


@dataclass(frozen=True)
class EmbeddingBatch:
    anchor: np.ndarray
    positive: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        a = as_vector(self.anchor, "anchor")
        p = as_vector(self.positive, "positive")
        n = np.asarray(self.negatives, dtype=FLOAT)
        if n.ndim == 1:
            n = n[None, :]
        n = as_matrix(n, "negatives")
        if not (a.shape == p.shape and n.shape[1] == a.shape[0]):
            raise UsageError(
                f"dimension mismatch: anchor {a.shape}, positive {p.shape}, negatives {n.shape}"
            )
        object.__setattr__(self, "anchor", a)
        object.__setattr__(self, "positive", p)
        object.__setattr__(self, "negatives", n)

    @property
    def m(self) -> int:
        return self.negatives.shape[0]

    @property
    def dim(self) -> int:
        return self.anchor.shape[0]

    def vectors(self):
        yield self.anchor
        yield self.positive
        yield from self.negatives

    def is_unit(self, tol=UNIT_TOL) -> bool:
        return all(abs(math.sqrt(dot(x, x)) - 1.0) <= tol for x in self.vectors())

    def swap_roles(self) -> "EmbeddingBatch":
        """Exchange anchor and positive."""
        return EmbeddingBatch(self.positive, self.anchor, self.negatives)

    def with_vectors(self, anchor=None, positive=None, negatives=None) -> "EmbeddingBatch":
        return EmbeddingBatch(
            self.anchor if anchor is None else anchor,
            self.positive if positive is None else positive,
            self.negatives if negatives is None else negatives,
        )


@dataclass(frozen=True)
class LossConfig:
    """Hyperparameters of the contrastive objective.

    ``eps_neg`` is a scalar shared by every negative or a per-negative sequence.
    ``clean_weight`` scales the unperturbed term; setting it to 0 trains on
    the perturbed term alone.
    """

    tau: float = 0.5
    eps_pos: float = 0.0
    eps_neg: float | Sequence[float] = 0.0
    alpha: float = 1.0
    beta: float = 0.0
    variant: str = "standard"
    clean_weight: float = 1.0

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise UsageError(f"tau must be positive, got {self.tau}")
        if not self.eps_pos >= 0:
            raise UsageError(f"eps_pos must be >= 0, got {self.eps_pos}")
        en = np.atleast_1d(np.asarray(self.eps_neg, dtype=FLOAT))
        if en.ndim != 1 or not np.all(en >= 0):
            raise UsageError(f"eps_neg must be >= 0, got {self.eps_neg}")
        if not self.alpha >= 0:
            raise UsageError(f"alpha must be >= 0, got {self.alpha}")
        if not self.clean_weight >= 0:
            raise UsageError(f"clean_weight must be >= 0, got {self.clean_weight}")
        if self.clean_weight == 0 and self.alpha == 0:
            raise UsageError("clean_weight and alpha cannot both be 0")
        if not self.beta >= 0:
            raise UsageError(f"beta must be >= 0, got {self.beta}")
        if self.variant not in VARIANTS:
            raise UsageError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not np.isscalar(self.eps_neg):
            object.__setattr__(self, "eps_neg", tuple(float(e) for e in en))

    @classmethod
    def with_eps(cls, eps: float, **kw) -> "LossConfig":
        """Single shared budget for the positive and every negative."""
        return cls(eps_pos=eps, eps_neg=eps, **kw)

    def eps_vector(self, m: int) -> np.ndarray:
        en = np.atleast_1d(np.asarray(self.eps_neg, dtype=FLOAT))
        if en.size == 1:
            return np.full(m, float(en[0]))
        if en.size != m:
            raise UsageError(f"eps_neg has {en.size} entries for {m} negatives")
        return en.copy()

    @property
    def has_perturbation(self) -> bool:
        return self.eps_pos > 0 or bool(np.any(np.asarray(self.eps_neg) > 0))


@dataclass
class LossGrad:
    d_anchor: np.ndarray
    d_positive: np.ndarray
    d_negatives: np.ndarray

    def __add__(self, other: "LossGrad") -> "LossGrad":
        return LossGrad(
            self.d_anchor + other.d_anchor,
            self.d_positive + other.d_positive,
            self.d_negatives + other.d_negatives,
        )

    def scale(self, c: float) -> "LossGrad":
        return LossGrad(c * self.d_anchor, c * self.d_positive, c * self.d_negatives)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.d_anchor, self.d_positive, self.d_negatives.ravel()])


def _require_unit(b: EmbeddingBatch):
    if not b.is_unit():
        raise UsageError("embeddings must be unit-norm (tolerance 1e-9)")


def _require_variant(cfg: LossConfig, variant: str):
    if cfg.variant != variant:
        raise UsageError(f"expected variant {variant!r}, got {cfg.variant!r}")


# ---------------------------------------------------------------------------
# Row-wise core shared by the pointwise and minibatch paths.
# ---------------------------------------------------------------------------


def contrast_rows(pos, neg, tau, beta=0.0, weight_sims=None):
    """Per-row ``-log softmax`` of the positive logit against (weighted) negatives.

    ``pos`` (R,) and ``neg`` (R, m) are the similarity values entering the
    logits (already shifted or transformed). ``weight_sims`` (R, m) are the raw
    similarities that set hardness weights when ``beta > 0``.

    Returns ``(loss, d_pos, d_neg, d_weight_sims)``; the last is ``None`` when
    ``beta == 0``.
    """
    m = neg.shape[1]
    logits = np.empty((neg.shape[0], m + 1))
    logits[:, 0] = pos / tau
    logits[:, 1:] = neg / tau
    q = None
    if beta > 0:
        ws = neg if weight_sims is None else weight_sims
        bs = beta * ws
        log_w = math.log(m) + bs - log_sum_exp_rows(bs)[:, None]
        logits[:, 1:] += log_w
        q = softmax_rows(bs)
    lse = log_sum_exp_rows(logits)
    loss = lse - logits[:, 0]
    p = np.exp(logits - lse[:, None])
    d_pos = (p[:, 0] - 1.0) / tau
    d_neg = p[:, 1:] / tau
    d_w = None
    if q is not None:
        pn = p[:, 1:]
        d_w = beta * (pn - q * pn.sum(axis=1, keepdims=True))
    return loss, d_pos, d_neg, d_w


def perturb_sims(pos, neg, eps_pos, eps_neg, variant):
    """Map clean similarities of unit vectors to perturbed ones.

    Returns ``(pos', neg', dpos'/dpos, dneg'/dneg)``. For ``post_norm`` the
    closed form uses ``|v + e u|^2 = 1 + 2 e s + e^2`` for unit ``v, u``.
    """
    if variant == "standard":
        return pos - eps_pos, neg + eps_neg, np.ones_like(pos), np.ones_like(neg)
    if variant == "post_norm":
        rp2 = 1.0 - 2.0 * eps_pos * pos + eps_pos**2
        rn2 = 1.0 + 2.0 * eps_neg * neg + eps_neg**2
        if np.any(rp2 <= 0.0) or np.any(rn2 <= 0.0):
            raise DegenerateInputError("perturbed embedding has zero norm")
        rp = np.sqrt(rp2)
        rn = np.sqrt(rn2)
        pp = (pos - eps_pos) / rp
        nn = (neg + eps_neg) / rn
        # d/ds of (s - e)/sqrt(1 - 2es + e^2) and (s + e)/sqrt(1 + 2es + e^2)
        dpp = (1.0 - eps_pos * pos) / (rp * rp2)
        dnn = (1.0 + eps_neg * neg) / (rn * rn2)
        return pp, nn, dpp, dnn
    raise UsageError(f"no closed-form similarity map for variant {variant!r}")


def objective_rows(pos, neg, cfg: LossConfig, eps_neg=None):
    """``(clean_weight * L + alpha * L_eps) / 2`` per row, with gradients w.r.t. the clean sims.

    ``eps_neg`` overrides ``cfg.eps_neg`` (scalar or array broadcastable to
    ``neg``). Only the ``standard`` and ``post_norm`` variants are closed form.
    """
    if eps_neg is None:
        eps_neg = cfg.eps_neg if np.isscalar(cfg.eps_neg) else np.asarray(cfg.eps_neg)
    beta = cfg.beta
    loss0, dp0, dn0, dw0 = contrast_rows(pos, neg, cfg.tau, beta)
    cw = cfg.clean_weight
    d_pos = cw * dp0
    d_neg = cw * dn0
    if dw0 is not None:
        d_neg += cw * dw0
    loss = cw * loss0
    if cfg.alpha > 0:
        pp, nn, dpp, dnn = perturb_sims(pos, neg, cfg.eps_pos, eps_neg, cfg.variant)
        loss1, dp1, dn1, dw1 = contrast_rows(pp, nn, cfg.tau, beta, weight_sims=neg)
        loss = loss + cfg.alpha * loss1
        d_pos += cfg.alpha * dp1 * dpp
        d_neg += cfg.alpha * dn1 * dnn
        if dw1 is not None:
            d_neg += cfg.alpha * dw1
    return 0.5 * loss, 0.5 * d_pos, 0.5 * d_neg


def _sims_to_vector_grads(b: EmbeddingBatch, d_pos: float, d_neg: np.ndarray) -> LossGrad:
    v = b.anchor
    return LossGrad(
        d_anchor=d_pos * b.positive + d_neg @ b.negatives,
        d_positive=d_pos * v,
        d_negatives=np.outer(d_neg, v),
    )


def _batch_sims(b: EmbeddingBatch):
    pos = np.array([b.anchor @ b.positive])
    neg = (b.negatives @ b.anchor)[None, :]
    return pos, neg


# ---------------------------------------------------------------------------
# Pointwise objectives
# ---------------------------------------------------------------------------


def _pointwise_from_logits(pos_logit: float, neg_logits: Sequence[float]) -> float:
    return log_sum_exp([pos_logit, *neg_logits]) - pos_logit


def infonce_pointwise(b: EmbeddingBatch, tau: float, check_unit: bool = True) -> float:
    """Point-wise InfoNCE loss of one anchor against its positive and negatives.

    ``check_unit=False`` scores arbitrary vectors by raw inner product, as needed
    for perturbed batches that have left the sphere.
    """
    if not tau > 0:
        raise UsageError(f"tau must be positive, got {tau}")
    if check_unit:
        _require_unit(b)
    v = b.anchor
    pos = dot(v, b.positive) / tau
    negs = [dot(v, u) / tau for u in b.negatives]
    return _pointwise_from_logits(pos, negs)


def infonce_probabilities(b: EmbeddingBatch, tau: float) -> np.ndarray:
    """Softmax weights ``[p_pos, p_1, ..., p_m]`` of the InfoNCE logits."""
    pos, neg = _batch_sims(b)
    logits = np.concatenate([pos, neg[0]]) / tau
    return softmax_rows(logits)


def infonce_grads(b: EmbeddingBatch, tau: float, check_unit: bool = True) -> LossGrad:
    """Exact gradient of :func:`infonce_pointwise` w.r.t. every embedding.

    The negative and positive gradients are multiples of the anchor:
    ``p_j * v / tau`` and ``(p_pos - 1) * v / tau``.
    """
    if check_unit:
        _require_unit(b)
    p = infonce_probabilities(b, tau)
    return _sims_to_vector_grads(b, (p[0] - 1.0) / tau, p[1:] / tau)


def ifm_pointwise(b: EmbeddingBatch, cfg: LossConfig) -> float:
    """Worst-case InfoNCE over l2 balls around the positive and negatives, in closed form.

    Equivalent to lowering the positive logit by ``eps_pos/tau`` and raising
    negative ``i`` by ``eps_i/tau``.
    """
    _require_variant(cfg, "standard")
    _require_unit(b)
    tau = cfg.tau
    eps = cfg.eps_vector(b.m)
    v = b.anchor
    pos = (dot(v, b.positive) - cfg.eps_pos) / tau
    negs = [(dot(v, u) + e) / tau for u, e in zip(b.negatives, eps)]
    return _pointwise_from_logits(pos, negs)


def ifm_grads(b: EmbeddingBatch, cfg: LossConfig) -> LossGrad:
    _require_variant(cfg, "standard")
    _require_unit(b)
    pos, neg = _batch_sims(b)
    _, dp, dn, _ = contrast_rows(pos - cfg.eps_pos, neg + cfg.eps_vector(b.m), cfg.tau)
    return _sims_to_vector_grads(b, dp[0], dn[0])


def ifm_optimal_updates(b: EmbeddingBatch, cfg: LossConfig) -> EmbeddingBatch:
    """Apply the worst-case perturbations: ``v_i += eps_i v`` and ``v+ -= eps+ v``.

    The results are deliberately not renormalized.
    """
    _require_variant(cfg, "standard")
    v = b.anchor
    eps = cfg.eps_vector(b.m)
    return b.with_vectors(
        positive=b.positive - cfg.eps_pos * v,
        negatives=b.negatives + eps[:, None] * v[None, :],
    )


def ifm_postnorm_pointwise(b: EmbeddingBatch, cfg: LossConfig) -> float:
    """Perturbed loss with every perturbed embedding projected back to the sphere."""
    _require_variant(cfg, "post_norm")
    _require_unit(b)
    moved = ifm_optimal_updates(b, LossConfig(cfg.tau, cfg.eps_pos, cfg.eps_neg))
    vecs = [moved.positive, *moved.negatives]
    norms = [math.sqrt(dot(x, x)) for x in vecs]
    if min(norms) == 0.0:
        raise DegenerateInputError("perturbed embedding has zero norm")
    renormed = moved.with_vectors(
        positive=vecs[0] / norms[0],
        negatives=np.array([x / n for x, n in zip(vecs[1:], norms[1:])]),
    )
    return infonce_pointwise(renormed, cfg.tau, check_unit=False)


def ifm_postnorm_grads(b: EmbeddingBatch, cfg: LossConfig) -> LossGrad:
    """Ambient-space gradient of :func:`ifm_postnorm_pointwise`."""
    _require_variant(cfg, "post_norm")
    _require_unit(b)
    v = b.anchor
    eps = cfg.eps_vector(b.m)
    u_pos = b.positive - cfg.eps_pos * v
    u_neg = b.negatives + eps[:, None] * v[None, :]
    r_pos = np.linalg.norm(u_pos)
    r_neg = np.linalg.norm(u_neg, axis=1)
    if r_pos == 0.0 or np.any(r_neg == 0.0):
        raise DegenerateInputError("perturbed embedding has zero norm")
    n_pos = u_pos / r_pos
    n_neg = u_neg / r_neg[:, None]
    inner = infonce_grads(EmbeddingBatch(v, n_pos, n_neg), cfg.tau, check_unit=False)
    # chain through x -> x/|x|: (I - n n^T) g / |x|
    g_pos = (inner.d_positive - n_pos * (n_pos @ inner.d_positive)) / r_pos
    g_neg = (
        inner.d_negatives - n_neg * np.sum(n_neg * inner.d_negatives, axis=1, keepdims=True)
    ) / r_neg[:, None]
    d_anchor = inner.d_anchor - cfg.eps_pos * g_pos + eps @ g_neg
    return LossGrad(d_anchor, g_pos, g_neg)


def perturbed_pointwise(b: EmbeddingBatch, cfg: LossConfig, ascent_steps: int = 20) -> float:
    """The perturbed term ``l_eps`` for whichever variant ``cfg`` selects."""
    if cfg.variant == "standard":
        return ifm_pointwise(b, cfg)
    if cfg.variant == "post_norm":
        return ifm_postnorm_pointwise(b, cfg)
    moved = prenorm_ascent(b, cfg, ascent_steps)
    return prenorm_loss(moved, cfg.tau)


def _weighted_rows(b: EmbeddingBatch, cfg: LossConfig):
    """Hardness-weighted combined objective of one batch via the shared row core."""
    if cfg.variant == "pre_norm":
        raise UsageError("pre_norm with beta > 0 is only defined on minibatches (nt_xent_prenorm)")
    _require_unit(b)
    pos, neg = _batch_sims(b)
    eps_neg = cfg.eps_vector(b.m)[None, :] if not np.isscalar(cfg.eps_neg) else cfg.eps_neg
    return objective_rows(pos, neg, cfg, eps_neg)


def combined_objective(b: EmbeddingBatch, cfg: LossConfig, ascent_steps: int = 20) -> float:
    """Multi-task objective ``(clean_weight * L + alpha * L_eps) / 2`` for one batch.

    With ``beta > 0`` both terms use the hardness weights of the clean
    similarities, exactly as the minibatch objective does.
    """
    if cfg.beta > 0:
        return float(_weighted_rows(b, cfg)[0][0])
    if cfg.variant == "pre_norm":
        base = prenorm_loss(b, cfg.tau)
    else:
        base = infonce_pointwise(b, cfg.tau)
    base = cfg.clean_weight * base
    if cfg.alpha == 0:
        return 0.5 * base
    return 0.5 * (base + cfg.alpha * perturbed_pointwise(b, cfg, ascent_steps))


def combined_grads(b: EmbeddingBatch, cfg: LossConfig, ascent_steps: int = 20) -> LossGrad:
    """Gradient of :func:`combined_objective`.

    For ``pre_norm`` the inner maximizer is held fixed (Danskin), so the result
    is the gradient at the perturbation returned by :func:`prenorm_ascent`.
    """
    if cfg.beta > 0:
        _, dp, dn = _weighted_rows(b, cfg)
        return _sims_to_vector_grads(b, dp[0], dn[0])
    if cfg.variant == "pre_norm":
        g = prenorm_grads(b, cfg.tau).scale(cfg.clean_weight)
        if cfg.alpha > 0:
            moved = prenorm_ascent(b, cfg, ascent_steps)
            g = g + prenorm_grads(moved, cfg.tau).scale(cfg.alpha)
        return g.scale(0.5)
    g = infonce_grads(b, cfg.tau).scale(cfg.clean_weight)
    if cfg.alpha > 0:
        if cfg.variant == "standard":
            g = g + ifm_grads(b, cfg).scale(cfg.alpha)
        else:
            g = g + ifm_postnorm_grads(b, cfg).scale(cfg.alpha)
    return g.scale(0.5)


def hardness_weights(b: EmbeddingBatch, beta: float) -> np.ndarray:
    """Importance weights ``m * softmax(beta * v.v_i)``; all ones at ``beta = 0``."""
    _, neg = _batch_sims(b)
    return b.m * softmax_rows(beta * neg[0])


def hardness_weighted_pointwise(b: EmbeddingBatch, tau: float, beta: float) -> float:
    """InfoNCE with the negative term tilted toward negatives similar to the anchor."""
    if not beta >= 0:
        raise UsageError(f"beta must be >= 0, got {beta}")
    if beta == 0:
        return infonce_pointwise(b, tau)
    _require_unit(b)
    v = b.anchor
    sims = [dot(v, u) for u in b.negatives]
    log_norm = log_sum_exp([beta * s for s in sims])
    log_m = math.log(b.m)
    pos = dot(v, b.positive) / tau
    negs = [s / tau + log_m + beta * s - log_norm for s in sims]
    return _pointwise_from_logits(pos, negs)


def hardness_weighted_grads(b: EmbeddingBatch, tau: float, beta: float) -> LossGrad:
    """Gradient of :func:`hardness_weighted_pointwise`, including through the weights."""
    _require_unit(b)
    pos, neg = _batch_sims(b)
    _, dp, dn, dw = contrast_rows(pos, neg, tau, beta)
    if dw is not None:
        dn = dn + dw
    return _sims_to_vector_grads(b, dp[0], dn[0])


# ---------------------------------------------------------------------------
# Pre-normalization variant: cosine-similarity logits on raw vectors.
# ---------------------------------------------------------------------------


def cosine_sim(u, v) -> float:
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity with a zero vector")
    return float(u @ v) / (nu * nv)


def cosine_sim_grad(v, u) -> np.ndarray:
    """Gradient of ``sim(v, u)`` w.r.t. ``v``; always orthogonal to ``v``."""
    v = np.asarray(v, dtype=FLOAT)
    u = np.asarray(u, dtype=FLOAT)
    nv = np.linalg.norm(v)
    nu = np.linalg.norm(u)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity with a zero vector")
    s = float(v @ u) / (nv * nu)
    return u / (nv * nu) - s * v / nv**2


def prenorm_direction(v, u) -> np.ndarray:
    """Scale-free ascent direction ``v/|v| - sim(u, v) u/|u|`` for a negative ``u``.

    Its norm is ``sqrt(1 - sim(u, v)^2)``. The positive moves along the
    negation of the same expression.
    """
    v = np.asarray(v, dtype=FLOAT)
    u = np.asarray(u, dtype=FLOAT)
    s = cosine_sim(u, v)
    return v / np.linalg.norm(v) - s * u / np.linalg.norm(u)


def _check_nonzero(b: EmbeddingBatch):
    if any(np.linalg.norm(x) == 0.0 for x in b.vectors()):
        raise DegenerateInputError("raw embeddings must be nonzero")


def prenorm_loss(raw: EmbeddingBatch, tau: float) -> float:
    """InfoNCE with cosine-similarity logits, defined on unnormalized vectors."""
    _check_nonzero(raw)
    v = raw.anchor
    pos = cosine_sim(v, raw.positive) / tau
    negs = [cosine_sim(v, u) / tau for u in raw.negatives]
    return _pointwise_from_logits(pos, negs)


def prenorm_grads(raw: EmbeddingBatch, tau: float) -> LossGrad:
    """Exact gradient of :func:`prenorm_loss` w.r.t. the raw vectors."""
    _check_nonzero(raw)
    v = raw.anchor
    sims = np.array([cosine_sim(v, raw.positive)] + [cosine_sim(v, u) for u in raw.negatives])
    p = softmax_rows(sims / tau)
    c_pos = (p[0] - 1.0) / tau
    c_neg = p[1:] / tau
    d_pos = c_pos * cosine_sim_grad(raw.positive, v)
    d_neg = np.array([c * cosine_sim_grad(u, v) for c, u in zip(c_neg, raw.negatives)])
    d_anchor = c_pos * cosine_sim_grad(v, raw.positive)
    for c, u in zip(c_neg, raw.negatives):
        d_anchor = d_anchor + c * cosine_sim_grad(v, u)
    return LossGrad(d_anchor, d_pos, d_neg)


def _project_ball(delta: np.ndarray, radius: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(delta, axis=-1, keepdims=True)
    r = np.asarray(radius, dtype=FLOAT).reshape(n.shape)
    scale = np.where(n > r, r / np.where(n > 0, n, 1.0), 1.0)
    return delta * scale


def prenorm_ascent(
    raw: EmbeddingBatch, cfg: LossConfig, steps: int, step_size: float | None = None
) -> EmbeddingBatch:
    """Projected ascent of :func:`prenorm_loss` over perturbations of the positive and negatives.

    Each vector moves along its own normalized gradient by ``step_size``
    (default ``eps/steps`` for that vector's budget) and is projected back
    into its ball after every step.
    """
    if steps < 1:
        raise UsageError(f"steps must be >= 1, got {steps}")
    _check_nonzero(raw)
    radii = np.concatenate([[cfg.eps_pos], cfg.eps_vector(raw.m)])
    if not np.any(radii > 0):
        return raw
    base = np.vstack([raw.positive, raw.negatives])
    h = radii / steps if step_size is None else np.full_like(radii, float(step_size))
    delta = np.zeros_like(base)
    for _ in range(steps):
        cur = raw.with_vectors(positive=base[0] + delta[0], negatives=base[1:] + delta[1:])
        g = prenorm_grads(cur, cfg.tau)
        G = np.vstack([g.d_positive, g.d_negatives])
        gn = np.linalg.norm(G, axis=1, keepdims=True)
        G = np.divide(G, gn, out=np.zeros_like(G), where=gn > 0)
        delta = _project_ball(delta + h[:, None] * G, radii)
    moved = base + delta
    return raw.with_vectors(positive=moved[0], negatives=moved[1:])


# ---------------------------------------------------------------------------
# Minibatch objectives: 2B views, view i pairs with view (i + B) mod 2B.
# ---------------------------------------------------------------------------


def _scalar_eps_neg(cfg: LossConfig) -> float:
    if not np.isscalar(cfg.eps_neg):
        raise UsageError("minibatch objectives need a single scalar eps_neg")
    return float(cfg.eps_neg)


def _pair_index(n2: int):
    b = n2 // 2
    idx = np.arange(n2)
    partner = (idx + b) % n2
    # negatives of row i: all columns except i and its partner, in column order
    mask = np.ones((n2, n2), dtype=bool)
    mask[idx, idx] = False
    mask[idx, partner] = False
    neg_cols = np.nonzero(mask)[1].reshape(n2, n2 - 2)
    return idx, partner, neg_cols


def nt_xent_objective(U: np.ndarray, cfg: LossConfig):
    """Mean combined objective over all ``2B`` anchors of a minibatch of unit embeddings.

    ``U[:B]`` and ``U[B:]`` are the two views of ``B`` positive pairs. Every
    anchor uses its partner as positive and the other ``2B - 2`` views as
    negatives. Returns ``(loss, dL/dU)``.
    """
    if cfg.variant == "pre_norm":
        raise UsageError("use nt_xent_prenorm for the pre_norm variant")
    n2 = U.shape[0]
    if n2 % 2 or n2 < 4:
        raise UsageError("need an even number (>= 4) of views")
    _scalar_eps_neg(cfg)
    idx, partner, neg_cols = _pair_index(n2)
    S = U @ U.T
    pos = S[idx, partner]
    neg = np.take_along_axis(S, neg_cols, axis=1)
    loss, d_pos, d_neg = objective_rows(pos, neg, cfg)
    dS = np.zeros_like(S)
    dS[idx, partner] = d_pos
    np.put_along_axis(dS, neg_cols, d_neg, axis=1)
    dS /= n2
    dU = (dS + dS.T) @ U
    return float(loss.mean()), dU


def infonce_minibatch(U: np.ndarray, tau: float) -> float:
    """Plain InfoNCE averaged over all anchors of a minibatch (evaluation helper)."""
    loss, _ = nt_xent_objective(U, LossConfig(tau=tau, alpha=0.0))
    return 2.0 * loss


def _cos_rows(A, B):
    """Cosine similarity and its gradients for row pairs (..., d)."""
    na = np.linalg.norm(A, axis=-1, keepdims=True)
    nb = np.linalg.norm(B, axis=-1, keepdims=True)
    s = np.sum(A * B, axis=-1, keepdims=True) / (na * nb)
    ga = B / (na * nb) - s * A / na**2
    gb = A / (na * nb) - s * B / nb**2
    return s[..., 0], ga, gb


def nt_xent_prenorm(Z: np.ndarray, cfg: LossConfig, steps: int = 5):
    """Minibatch objective for the ``pre_norm`` variant on raw encoder outputs ``Z``.

    The perturbed term finds, for every (anchor, other view) pair, a
    perturbation of the other view in its ball by ``steps`` of normalized
    projected ascent, then differentiates with that perturbation held fixed.
    Returns ``(loss, dL/dZ)``.
    """
    n2, d = Z.shape
    if n2 % 2 or n2 < 4:
        raise UsageError("need an even number (>= 4) of views")
    if np.any(np.linalg.norm(Z, axis=1) == 0.0):
        raise DegenerateInputError("raw embeddings must be nonzero")
    idx, partner, neg_cols = _pair_index(n2)
    other = np.concatenate([partner[:, None], neg_cols], axis=1)  # (n2, n2-1)
    A = np.broadcast_to(Z[:, None, :], (n2, n2 - 1, d))
    Bv = Z[other]

    def rows(Bmat):
        s, ga, gb = _cos_rows(A, Bmat)
        loss, dp, dn, dw = contrast_rows(s[:, 0], s[:, 1:], cfg.tau, cfg.beta, weight_sims=s0[:, 1:])
        ds = np.concatenate([dp[:, None], dn], axis=1)
        return loss, ds, ga, gb, dw

    s0, _, _ = _cos_rows(A, Bv)
    loss0, ds0, ga0, gb0, dw0 = rows(Bv)
    if dw0 is not None:
        ds0[:, 1:] += dw0
    cw = cfg.clean_weight
    dZ = np.zeros_like(Z)
    dZ += cw * np.sum(ds0[..., None] * ga0, axis=1)
    np.add.at(dZ, other, cw * ds0[..., None] * gb0)
    total = cw * loss0
    if cfg.alpha > 0 and cfg.has_perturbation:
        radii = np.full((n2, n2 - 1), _scalar_eps_neg(cfg))
        radii[:, 0] = cfg.eps_pos
        sign = np.ones((n2, n2 - 1, 1))
        sign[:, 0] = -1.0
        delta = np.zeros_like(Bv)
        h = radii / steps
        for _ in range(steps):
            _, _, gb = _cos_rows(A, Bv + delta)
            # increasing the loss: negatives move toward the anchor, the positive away
            G = sign * gb
            gn = np.linalg.norm(G, axis=-1, keepdims=True)
            G = np.divide(G, gn, out=np.zeros_like(G), where=gn > 0)
            delta = _project_ball(delta + h[..., None] * G, radii[..., None])
        loss1, ds1, ga1, gb1, dw1 = rows(Bv + delta)
        if dw1 is not None:
            # weights depend on the clean similarities
            _, ga_c, gb_c = _cos_rows(A, Bv)
            dZ[:] += cfg.alpha * np.sum(dw1[..., None] * ga_c[:, 1:], axis=1)
            np.add.at(dZ, other[:, 1:], cfg.alpha * dw1[..., None] * gb_c[:, 1:])
        dZ += cfg.alpha * np.sum(ds1[..., None] * ga1, axis=1)
        np.add.at(dZ, other, cfg.alpha * ds1[..., None] * gb1)
        total = total + cfg.alpha * loss1
    return float(0.5 * total.mean()), 0.5 * dZ / n2
