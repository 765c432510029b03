"""End-to-end acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, printed in the terminal summary. The
training protocol shared by criteria 6, 7, 8 and 11: 1000 Adam steps of 128
positive pairs, seeds 0, 1 and 2, readout generator seeded with seed + 100.
"""
import json
import math
import time
from functools import lru_cache

import numpy as np
import pytest

from conftest import central_diff, record_criterion, rel_err, unit_rows
from ifmlab.cli import main
from ifmlab.encoder import Encoder
from ifmlab.errors import DegenerateInputError
from ifmlab.evaluation import (
    _embed,
    collapse_unif,
    finite_m_gap,
    limiting_loss,
    limiting_loss_from_embeddings,
    readout,
    split_indices,
    train_probe,
)
from ifmlab.latent_analysis import eps_ball_oracle, fgsm_split, permuted_control, refinetune_eval
from ifmlab.losses import (
    EmbeddingBatch,
    LossConfig,
    combined_grads,
    cosine_sim,
    cosine_sim_grad,
    hardness_weighted_pointwise,
    ifm_pointwise,
    infonce_pointwise,
    objective_rows,
    prenorm_ascent,
    prenorm_direction,
    prenorm_loss,
)
from ifmlab.numerics import make_rng
from ifmlab.synthdata import default_spec, probe_dataset, two_feature_spec
from ifmlab.theorycheck import OracleEncoder, SphereFeatureModel, prop1_check, prop2_check, sphere_unif
from ifmlab.training import TrainSettings, train_encoder
from ifmlab.verify import reflect_swap

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
PROTOCOL = TrainSettings(steps=1000, batch_pairs=128)
SPECS = {"default": default_spec(), "two_feature": two_feature_spec()}


@lru_cache(maxsize=None)
def trained(spec_name, loss_cfg, seed):
    spec = SPECS[spec_name]
    enc = train_encoder(spec, loss_cfg, PROTOCOL, seed).encoder
    return enc, readout(enc, spec, make_rng(100 + seed))


def mean_accuracy(spec_name, loss_cfg):
    return np.mean([trained(spec_name, loss_cfg, s)[1].accuracy for s in SEEDS], axis=0)


def random_unit_batch(rng, d, m):
    V = unit_rows(rng, m + 2, d)
    return EmbeddingBatch(V[0], V[1], V[2:])


def raw_objective(x, d, m, cfg):
    """Combined objective as a function of raw inner products, defined off the sphere."""
    v, vp, N = x[:d], x[d : 2 * d], x[2 * d :].reshape(m, d)
    return float(objective_rows(np.array([v @ vp]), (N @ v)[None, :], cfg)[0][0])


def test_1_gradient_correctness():
    start = time.perf_counter()
    rng = make_rng(1001)
    loss_worst = 0.0
    for _ in range(120):
        d, m = int(rng.integers(2, 17)), int(rng.integers(1, 9))
        b = random_unit_batch(rng, d, m)
        cfg = LossConfig(
            tau=float(rng.uniform(0.1, 1.0)),
            eps_pos=float(rng.uniform(0, 0.3)),
            eps_neg=float(rng.uniform(0, 0.3)),
            alpha=float(rng.uniform(0, 2)),
            beta=float(rng.choice([0.0, rng.uniform(0, 3)])),
        )
        x = np.concatenate([b.anchor, b.positive, b.negatives.ravel()])
        num = central_diff(lambda x: raw_objective(x, d, m, cfg), x)
        loss_worst = max(loss_worst, rel_err(combined_grads(b, cfg).flat(), num))

    enc_worst, nets = 0.0, 0
    while nets < 100:
        dims = [int(rng.integers(2, 9))] + [int(rng.integers(4, 12)) for _ in range(int(rng.integers(0, 3)))]
        dims.append(int(rng.integers(2, 17)))
        enc = Encoder.init(dims, rng)
        X = rng.normal(size=(2, dims[0]))
        try:
            if np.min(np.linalg.norm(enc.raw(X)[0], axis=1)) < 1e-3:
                continue
        except DegenerateInputError:
            continue  # all ReLUs dead for this input; normalization undefined
        nets += 1
        T = rng.normal(size=(2, dims[-1]))
        U, tape = enc.forward(X)
        grads, dX = enc.backward(tape, T)
        for p, g in zip(enc.params(), grads):
            def f(x, p=p):
                saved = p.copy()
                p[...] = x.reshape(p.shape)
                try:
                    return float(np.sum(enc.embed(X) * T))
                finally:
                    p[...] = saved

            enc_worst = max(enc_worst, rel_err(g.ravel(), central_diff(f, p.ravel())))
        num_dx = central_diff(lambda x: float(np.sum(enc.embed(x.reshape(X.shape)) * T)), X.ravel())
        enc_worst = max(enc_worst, rel_err(dX.ravel(), num_dx))
    elapsed = time.perf_counter() - start
    ok = loss_worst <= 1e-6 and enc_worst <= 1e-5 and elapsed < 30
    record_criterion(
        1, ok,
        f"loss-level max rel err {loss_worst:.1e} (120 batches), encoder {enc_worst:.1e} (100 nets), {elapsed:.1f}s",
    )
    assert ok


def test_2_closed_form_optimality():
    start = time.perf_counter()
    rng = make_rng(1002)
    worst_gap, worst_excess = 0.0, -math.inf
    for _ in range(50):
        b = random_unit_batch(rng, 8, 4)
        cfg = LossConfig.with_eps(0.1, tau=0.5)
        closed = ifm_pointwise(b, cfg)
        found = eps_ball_oracle(b, cfg, restarts=5, steps=200, rng=rng)
        worst_gap = max(worst_gap, abs(found - closed))
        worst_excess = max(worst_excess, found - closed)
    elapsed = time.perf_counter() - start
    ok = worst_gap <= 1e-4 and worst_excess <= 1e-9 and elapsed < 60
    record_criterion(
        2, ok, f"max |oracle - closed form| {worst_gap:.1e}, max excess {worst_excess:.1e}, {elapsed:.1f}s"
    )
    assert ok


def test_3_loss_identities():
    rng = make_rng(1003)
    reduction = all(
        ifm_pointwise(b, LossConfig(tau=t)) == infonce_pointwise(b, t)
        for b, t in ((random_unit_batch(rng, 8, 4), float(rng.uniform(0.1, 1))) for _ in range(100))
    )
    strict = 0
    for _ in range(200):
        b = random_unit_batch(rng, 8, 4)
        eps = rng.uniform(0, 0.3, size=5)
        k = int(rng.integers(0, 5))
        up = eps.copy()
        up[k] += float(rng.uniform(1e-3, 0.3))
        lo = ifm_pointwise(b, LossConfig(tau=0.5, eps_pos=eps[0], eps_neg=tuple(eps[1:])))
        hi = ifm_pointwise(b, LossConfig(tau=0.5, eps_pos=up[0], eps_neg=tuple(up[1:])))
        strict += hi > lo
    sym_worst = 0.0
    for _ in range(100):
        b = random_unit_batch(rng, 8, 4)
        cfg = LossConfig.with_eps(float(rng.uniform(0, 0.3)), tau=0.5)
        sym_worst = max(sym_worst, abs(ifm_pointwise(reflect_swap(b), cfg) - ifm_pointwise(b, cfg)))
    ok = reduction and strict == 200 and sym_worst <= 1e-12
    record_criterion(
        3, ok,
        f"eps=0 reduction exact: {reduction}; strict increase {strict}/200; "
        f"role symmetry max diff {sym_worst:.1e} (float rounding)",
    )
    assert ok


def test_4_limiting_loss_anchors():
    start = time.perf_counter()
    tau = 1.0
    U = np.tile([1.0, 0.0], (1000, 1))
    est = limiting_loss_from_embeddings(U, U, [U[:100]] * 10, tau)
    collapse_err = abs(est.unif - collapse_unif(tau))

    model = SphereFeatureModel()
    oracle = OracleEncoder(model, 0)
    circ = limiting_loss(oracle, model, 100_000, tau, make_rng(1004))
    ref = sphere_unif(2, tau)
    circ_z = abs(circ.total - ref) / circ.total_se

    (_, gap, gap_se), = finite_m_gap(oracle, model, tau, [512], make_rng(1005))
    gap_z = abs(gap - ref) / gap_se
    elapsed = time.perf_counter() - start
    ok = collapse_err <= 1e-6 and est.align == 0.0 and circ_z <= 2 and gap_z <= 3 and elapsed < 120
    record_criterion(
        4, ok,
        f"collapse unif err {collapse_err:.1e}; circle total {circ.total:.5f} vs log I0(1) {ref:.5f} "
        f"({circ_z:.2f} SE); m=512 gap {gap:.5f} ({gap_z:.2f} SE); {elapsed:.1f}s",
    )
    assert ok


def test_5_equal_loss_different_features():
    start = time.perf_counter()
    rep = prop1_check(d=2, n_mc=100_000, tau=1.0, seed=1006)
    elapsed = time.perf_counter() - start
    indist = rep.loss_gap <= 2 * rep.loss_gap_se
    spread = rep.distinguish_acc - rep.suppress_acc
    ok = indist and spread > 0.5 and elapsed < 120
    record_criterion(
        5, ok,
        f"loss gap {rep.loss_gap:.1e} vs 2 SE {2 * rep.loss_gap_se:.1e}; probe {rep.suppress_acc:.3f} "
        f"vs {rep.distinguish_acc:.3f} ({100 * spread:.0f} points); {elapsed:.1f}s",
    )
    assert ok


def test_6_conditioned_negatives_suppress():
    start = time.perf_counter()
    rep = prop2_check(default_spec(), {0}, LossConfig(tau=0.5, alpha=0.0), PROTOCOL, SEEDS)
    held = float(np.mean(rep.held_scores()))
    comp = float(np.mean(rep.complement_scores()))
    elapsed = time.perf_counter() - start
    ok = held < 0.2 and comp > 0.5 and elapsed < 600
    record_criterion(
        6, ok, f"held feature 0 score {held:.3f} (< 0.2), complement {comp:.3f} (> 0.5), {elapsed:.0f}s"
    )
    assert ok


def test_7_difficulty_levers():
    start = time.perf_counter()
    cold = mean_accuracy("two_feature", LossConfig(tau=0.1))
    warm = mean_accuracy("two_feature", LossConfig(tau=1.0))
    sharp = mean_accuracy("two_feature", LossConfig(tau=0.5, beta=2.0))
    flat_ = mean_accuracy("two_feature", LossConfig(tau=0.5, beta=0.0))
    elapsed = time.perf_counter() - start
    tau_ok = cold[1] - warm[1] >= 0.10 and cold[0] < warm[0]
    beta_ok = sharp[1] > flat_[1] and sharp[0] < flat_[0]
    ok = tau_ok and beta_ok and elapsed < 900
    record_criterion(
        7, ok,
        f"tau 0.1 vs 1.0: hard {cold[1]:.3f} vs {warm[1]:.3f}, easy {cold[0]:.3f} vs {warm[0]:.3f}; "
        f"beta 2 vs 0: hard {sharp[1]:.3f} vs {flat_[1]:.3f}, easy {sharp[0]:.3f} vs {flat_[0]:.3f}; "
        f"{elapsed:.0f}s",
    )
    assert ok


def test_8_latent_perturbation():
    start = time.perf_counter()
    base = mean_accuracy("default", LossConfig(tau=0.5))
    ifm = mean_accuracy("default", LossConfig.with_eps(0.1, tau=0.5, alpha=1.0))
    alone = mean_accuracy("default", LossConfig.with_eps(0.1, tau=0.5, alpha=1.0, clean_weight=0.0))
    elapsed = time.perf_counter() - start
    drop = float(np.max(base - ifm))
    ok = ifm.mean() > base.mean() and drop <= 0.02 and alone.mean() <= ifm.mean() and elapsed < 1200
    record_criterion(
        8, ok,
        f"mean acc baseline {base.mean():.4f}, combined {ifm.mean():.4f}, perturbed-only {alone.mean():.4f}; "
        f"per-feature baseline {np.round(base, 3).tolist()} combined {np.round(ifm, 3).tolist()}; "
        f"largest drop {100 * drop:.1f} points; {elapsed:.0f}s",
    )
    assert ok


def test_9_prenorm_identities():
    rng = make_rng(1009)
    norm_worst = orth_worst = 0.0
    for _ in range(200):
        a, c = rng.uniform(0.1, 10, size=2)
        v, u = a * rng.normal(size=8), c * rng.normal(size=8)
        s = cosine_sim(v, u)
        norm_worst = max(norm_worst, abs(np.linalg.norm(prenorm_direction(v, u)) - math.sqrt(1 - s * s)))
        g = cosine_sim_grad(v, u)
        orth_worst = max(orth_worst, abs(v @ g) / max(1.0, np.linalg.norm(v) * np.linalg.norm(g)))
    monotone = 0
    for _ in range(50):
        b = random_unit_batch(rng, 8, 4)
        cfg = LossConfig.with_eps(0.2, tau=0.5, variant="pre_norm")
        # fixed step size: `k` steps is the k-th iterate of one ascent path
        vals = [prenorm_loss(prenorm_ascent(b, cfg, k, step_size=0.2 / 20), 0.5) for k in range(1, 21)]
        monotone += bool(np.all(np.diff([prenorm_loss(b, 0.5)] + vals) >= 0))
    ok = norm_worst <= 1e-8 and orth_worst <= 1e-10 and monotone == 50
    record_criterion(
        9, ok,
        f"direction norm err {norm_worst:.1e}; v . grad {orth_worst:.1e}; ascent monotone on {monotone}/50 batches",
    )
    assert ok


def test_10_hardness_reweighting():
    rng = make_rng(1010)
    exact = all(
        hardness_weighted_pointwise(b, 0.5, 0.0) == infonce_pointwise(b, 0.5)
        for b in (random_unit_batch(rng, 8, 5) for _ in range(100))
    )
    grid = np.linspace(0.0, 10.0, 41)
    nondecreasing = 0
    for _ in range(100):
        b = random_unit_batch(rng, 8, 5)
        vals = [hardness_weighted_pointwise(b, 0.5, beta) for beta in grid]
        nondecreasing += bool(np.all(np.diff(vals) >= 0))
    ok = exact and nondecreasing == 100
    record_criterion(10, ok, f"beta=0 exact: {exact}; nondecreasing over beta grid on {nondecreasing}/100 batches")
    assert ok


def test_11_fgsm_protocol():
    start = time.perf_counter()
    spec = default_spec()
    feature = 0
    rows, deterministic, ok = [], True, True
    for seed in SEEDS:
        enc = trained("default", LossConfig(tau=0.5), seed)[0]
        rng = make_rng(200 + seed)
        X, Z = probe_dataset(spec, 1000, rng, augment=False)
        y = Z[:, feature]
        tr, te = split_indices(len(y), rng)
        probe = train_probe(_embed(enc, X[tr]), y[tr], 10)
        state = rng.bit_generator.state
        split = fgsm_split(enc, probe, X[tr], y[tr], rng)
        rng.bit_generator.state = state
        again = fgsm_split(enc, probe, X[tr], y[tr], rng)
        same = split.x_adv.tobytes() == again.x_adv.tobytes() and np.array_equal(split.targets, again.targets)
        deterministic &= same
        acc_d, acc_r, _ = refinetune_eval(enc, split, (X[tr], y[tr]), (X[te], y[te]), 10)
        perm = permuted_control(enc, (X[tr], y[tr]), (X[te], y[te]), 10, rng)
        ok &= same and abs(acc_r - acc_d) <= 0.10 and abs(perm - 0.1) <= 0.05
        rows.append(f"seed {seed}: D {acc_d:.3f} D_R {acc_r:.3f} permuted {perm:.3f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 300
    record_criterion(11, ok, f"feature {feature}, split deterministic: {deterministic}; " + "; ".join(rows))
    assert ok


def test_12_reproducible_train(tmp_path):
    rows = []
    for run in ("a", "b"):
        cfg = {"schema_version": 1, "seed": 3, "out": str(tmp_path / run)}
        path = tmp_path / f"{run}.json"
        path.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(path)]) == 0
        rows.append(((tmp_path / run / "metrics.csv").read_bytes(), (tmp_path / run / "encoder.ckpt").read_bytes()))
    ok = rows[0] == rows[1]
    record_criterion(12, ok, f"two runs of train: metrics rows identical {rows[0][0] == rows[1][0]}, "
                     f"checkpoints identical {rows[0][1] == rows[1][1]}")
    assert ok
