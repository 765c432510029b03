"""Self-check suite run by ``ifmlab verify``.

Each check draws its own random instances from a fixed seed and returns a
:class:`CheckResult`. The suite is a quick sanity pass over an installed
build; the test suite covers the same ground more exhaustively.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import Encoder
from .evaluation import collapse_unif, limiting_loss_from_embeddings
from .latent_analysis import eps_ball_oracle
from .losses import (
    EmbeddingBatch,
    LossConfig,
    combined_grads,
    ifm_pointwise,
    infonce_pointwise,
    objective_rows,
)
from .numerics import make_rng
from .theorycheck import prop1_check


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def random_unit(rng, n, d):
    G = rng.normal(size=(n, d))
    return G / np.linalg.norm(G, axis=1, keepdims=True)


def random_batch(rng, d=8, m=4) -> EmbeddingBatch:
    V = random_unit(rng, m + 2, d)
    return EmbeddingBatch(V[0], V[1], V[2:])


def reflect_swap(b: EmbeddingBatch) -> EmbeddingBatch:
    """Swap anchor and positive and reflect the negatives by the map exchanging them.

    The Householder reflection through the bisector of anchor and positive
    is orthogonal and exchanges the two, so every inner product the loss
    sees is preserved.
    """
    w = b.anchor - b.positive
    nw = np.linalg.norm(w)
    if nw == 0.0:
        return b.swap_roles()
    w = w / nw
    N = b.negatives - 2.0 * np.outer(b.negatives @ w, w)
    return EmbeddingBatch(b.positive, b.anchor, N)


def _rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def fd_batch_grad(f, b: EmbeddingBatch, h=1e-6) -> np.ndarray:
    """Central differences of ``f`` over every coordinate of the batch (no renormalization)."""
    flat = np.concatenate([b.anchor, b.positive, b.negatives.ravel()])
    d, m = b.dim, b.m
    out = np.zeros_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h

        def mk(x):
            return EmbeddingBatch(x[:d], x[d : 2 * d], x[2 * d :].reshape(m, d))

        out[i] = (f(mk(up)) - f(mk(dn))) / (2 * h)
    return out


def check_loss_gradients(seed=0, n=30) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n):
        b = random_batch(rng, d=int(rng.integers(2, 9)), m=int(rng.integers(1, 6)))
        cfg = LossConfig.with_eps(float(rng.uniform(0, 0.3)), tau=float(rng.uniform(0.2, 1.0)))
        num = fd_batch_grad(lambda x: _raw_objective(x, cfg), b)
        ana = combined_grads(b, cfg).flat()
        worst = max(worst, _rel_err(ana, num))
    return CheckResult("loss gradients", worst <= 1e-6, f"max rel err {worst:.2e} over {n} batches")


def _raw_objective(b, cfg):
    """Combined objective as a function of raw inner products (defined off the sphere)."""
    pos = np.array([b.anchor @ b.positive])
    neg = (b.negatives @ b.anchor)[None, :]
    return float(objective_rows(pos, neg, cfg)[0][0])


def check_encoder_gradients(seed=1, n=5) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    h = 1e-6
    for _ in range(n):
        enc = Encoder.init([6, 7, 5, 3], rng)
        X = rng.normal(size=(4, 6))
        T = rng.normal(size=(4, 3))
        U, tape = enc.forward(X)
        grads, _ = enc.backward(tape, T)
        for p, g in zip(enc.params(), grads):
            num = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                fp = float(np.sum(enc.embed(X) * T))
                p[idx] = old - h
                fm = float(np.sum(enc.embed(X) * T))
                p[idx] = old
                num[idx] = (fp - fm) / (2 * h)
            worst = max(worst, _rel_err(g, num))
    return CheckResult("encoder backprop", worst <= 1e-5, f"max rel err {worst:.2e} over {n} nets")


def check_closed_form(seed=2, n=5) -> CheckResult:
    rng = make_rng(seed)
    worst_gap, worst_excess = 0.0, -math.inf
    for _ in range(n):
        b = random_batch(rng)
        cfg = LossConfig.with_eps(0.1, tau=0.5)
        closed = ifm_pointwise(b, cfg)
        found = eps_ball_oracle(b, cfg, rng=rng)
        worst_gap = max(worst_gap, abs(closed - found))
        worst_excess = max(worst_excess, found - closed)
    ok = worst_gap <= 1e-4 and worst_excess <= 1e-9
    return CheckResult("closed form vs ball search", ok, f"max gap {worst_gap:.2e}")


def check_identities(seed=3, n=50) -> CheckResult:
    rng = make_rng(seed)
    bad = []
    for _ in range(n):
        b = random_batch(rng)
        tau = float(rng.uniform(0.1, 1.0))
        if ifm_pointwise(b, LossConfig(tau=tau)) != infonce_pointwise(b, tau):
            bad.append("eps=0 reduction")
        e1, e2 = sorted(rng.uniform(0, 0.5, size=2))
        if e1 < e2:
            lo = ifm_pointwise(b, LossConfig.with_eps(e1, tau=tau))
            hi = ifm_pointwise(b, LossConfig.with_eps(e2, tau=tau))
            if not hi > lo:
                bad.append("eps monotonicity")
        cfg = LossConfig.with_eps(float(e2), tau=tau)
        if abs(ifm_pointwise(b, cfg) - ifm_pointwise(reflect_swap(b), cfg)) > 1e-12:
            bad.append("role symmetry")
    detail = "all hold" if not bad else f"violations: {sorted(set(bad))}"
    return CheckResult("loss identities", not bad, detail)


def check_limiting_anchors(seed=4) -> CheckResult:
    tau = 0.5
    U = np.tile([1.0, 0.0], (200, 1))
    est = limiting_loss_from_embeddings(U, U, [U[:50]] * 4, tau)
    collapse_ok = abs(est.unif - collapse_unif(tau)) <= 1e-6 and est.align == 0.0
    rep = prop1_check(n_mc=20_000, tau=1.0, seed=seed)
    circ_ok = abs(rep.distinguish.total - rep.analytic_unif) <= 2 * rep.distinguish.total_se
    return CheckResult(
        "limiting-loss anchors",
        collapse_ok and circ_ok,
        f"collapse unif {est.unif:.6f}, circle {rep.distinguish.total:.6f} vs {rep.analytic_unif:.6f}",
    )


def check_prop1(seed=5) -> CheckResult:
    rep = prop1_check(n_mc=20_000, tau=1.0, seed=seed)
    return CheckResult(
        "equal loss, different features",
        rep.consistent,
        f"loss gap {rep.loss_gap:.2e} (2 SE {2 * rep.loss_gap_se:.2e}), "
        f"probe {rep.suppress_acc:.2f} vs {rep.distinguish_acc:.2f}",
    )


ALL_CHECKS = (
    check_loss_gradients,
    check_encoder_gradients,
    check_closed_form,
    check_identities,
    check_limiting_anchors,
    check_prop1,
)


def run_all() -> list[CheckResult]:
    return [c() for c in ALL_CHECKS]
