"""Linear readout, suppression scores, limiting-loss estimates and sweep correlations.

Metric rows are comma-separated text with the header::

    run_id,tau,beta,eps,alpha,variant,seed,acc_0,...,acc_{n-1},eval_loss

``eval_loss`` is always plain InfoNCE at ``TAU_EVAL = 0.5`` so losses are
comparable across runs trained at different temperatures.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInputError, FormatError, UsageError
from .losses import infonce_minibatch
from .numerics import FLOAT, log_sum_exp_rows, pearson, softmax_rows
from . import synthdata

TAU_EVAL = 0.5
PROBE_ITERS = 500
PROBE_LR = 0.1
PROBE_L2 = 1e-4


@dataclass
class LinearProbe:
    """Multinomial logistic regression on standardized embeddings."""

    mean: np.ndarray
    scale: np.ndarray
    W: np.ndarray  # (dim, n_classes)
    b: np.ndarray  # (n_classes,)

    def logits(self, E) -> np.ndarray:
        return ((np.asarray(E, dtype=FLOAT) - self.mean) / self.scale) @ self.W + self.b

    def predict(self, E) -> np.ndarray:
        return np.argmax(self.logits(E), axis=-1)

    def accuracy(self, E, y) -> float:
        return float(np.mean(self.predict(E) == np.asarray(y)))

    def loss_grad(self, E, targets) -> np.ndarray:
        """Gradient of the per-row cross-entropy w.r.t. the embeddings ``E``."""
        E = np.atleast_2d(E)
        P = softmax_rows(self.logits(E))
        P[np.arange(E.shape[0]), np.asarray(targets)] -= 1.0
        return (P @ self.W.T) / self.scale


def train_probe(
    embeddings,
    labels,
    n_classes: int,
    iters: int = PROBE_ITERS,
    l2: float = PROBE_L2,
    lr: float = PROBE_LR,
) -> LinearProbe:
    """Fit softmax regression by full-batch gradient descent for a fixed number of steps.

    Features are standardized with the training mean and standard deviation,
    which makes the fit invariant to a common rescaling of the embeddings.
    """
    E = np.asarray(embeddings, dtype=FLOAT)
    y = np.asarray(labels)
    if E.ndim != 2 or y.shape != (E.shape[0],):
        raise UsageError("embeddings must be (n, d) with one label per row")
    if np.unique(y).size < 2:
        raise DegenerateInputError("probe needs at least two classes in the labels")
    if y.min() < 0 or y.max() >= n_classes:
        raise UsageError("labels out of range for n_classes")
    mean = E.mean(axis=0)
    scale = E.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    X = (E - mean) / scale
    n, d = X.shape
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), y] = 1.0
    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    for _ in range(iters):
        P = softmax_rows(X @ W + b)
        G = (P - Y) / n
        W -= lr * (X.T @ G + l2 * W)
        b -= lr * G.sum(axis=0)
    return LinearProbe(mean, scale, W, b)


@dataclass
class ProbeResult:
    accuracy: tuple
    chance: tuple
    eval_loss: float

    @property
    def error(self) -> tuple:
        return tuple(1.0 - a for a in self.accuracy)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracy))


def _embed(enc, X) -> np.ndarray:
    if hasattr(enc, "embed"):
        return enc.embed(X)
    return np.asarray(enc(X), dtype=FLOAT)


def split_indices(n: int, rng, train_frac: float = 0.8):
    perm = rng.permutation(n)
    k = int(round(train_frac * n))
    return perm[:k], perm[k:]


def eval_infonce(enc, spec, rng, tau: float = TAU_EVAL, batch_pairs: int = 128, n_batches: int = 8):
    """Mean plain InfoNCE over fresh minibatches, at a fixed evaluation temperature."""
    vals = []
    for _ in range(n_batches):
        X1, X2, _ = synthdata.sample_pairs(spec, batch_pairs, rng)
        U = _embed(enc, np.vstack([X1, X2]))
        vals.append(infonce_minibatch(U, tau))
    return float(np.mean(vals))


def readout(
    enc,
    spec,
    rng,
    n_samples: int = 2000,
    augment: bool = True,
    tau_eval: float = TAU_EVAL,
    iters: int = PROBE_ITERS,
) -> ProbeResult:
    """Held-out linear-probe accuracy for every feature, plus the evaluation loss.

    Probe inputs carry the training augmentations unless ``augment=False``.
    """
    X, Z = synthdata.probe_dataset(spec, n_samples, rng, augment=augment)
    E = _embed(enc, X)
    tr, te = split_indices(n_samples, rng)
    accs = []
    for j, c in enumerate(spec.cardinalities):
        probe = train_probe(E[tr], Z[tr, j], c, iters=iters)
        accs.append(probe.accuracy(E[te], Z[te, j]))
    loss = eval_infonce(enc, spec, rng, tau_eval)
    return ProbeResult(tuple(accs), tuple(spec.chance(j) for j in range(spec.n_features)), loss)


def suppression_score(result: ProbeResult, j: int) -> float:
    """Chance-normalized accuracy on feature ``j``: 0 means suppressed, 1 fully distinguished."""
    acc, ch = result.accuracy[j], result.chance[j]
    return float(min(1.0, max(0.0, (acc - ch) / (1.0 - ch))))


# ---------------------------------------------------------------------------
# Limiting loss
# ---------------------------------------------------------------------------


@dataclass
class LimitingLossEstimate:
    align: float
    unif: float
    align_se: float
    unif_se: float

    @property
    def total(self) -> float:
        return self.align + self.unif

    @property
    def total_se(self) -> float:
        return math.hypot(self.align_se, self.unif_se)


def _pairs(source, n, rng):
    if isinstance(source, synthdata.SyntheticDatasetSpec):
        X1, X2, _ = synthdata.sample_pairs(source, n, rng)
        return X1, X2
    return source.sample_pairs(n, rng)


def _singles(source, n, rng):
    if isinstance(source, synthdata.SyntheticDatasetSpec):
        return synthdata.probe_dataset(source, n, rng)[0]
    return source.sample(n, rng)


def _log_mean_exp(S: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise ``log mean exp(S / tau)`` with a second-order small-pool bias correction."""
    c = 1.0 / tau
    W = np.exp(S / tau - c)
    mu = W.mean(axis=1)
    var = W.var(axis=1, ddof=1) if W.shape[1] > 1 else np.zeros_like(mu)
    return c + np.log(mu) + var / (2.0 * W.shape[1] * mu * mu)


def limiting_loss_from_embeddings(U, U_plus, pools: Sequence[np.ndarray], tau: float):
    """Estimate alignment and uniformity from embedded pairs and negative pools.

    The anchors ``U_plus`` are split into ``len(pools)`` contiguous groups, each
    scored against its own pool; the uniformity standard error is taken across
    groups so that it reflects pool-to-pool variation.
    """
    U = np.asarray(U, dtype=FLOAT)
    U_plus = np.asarray(U_plus, dtype=FLOAT)
    d2 = np.sum((U - U_plus) ** 2, axis=1) / (2.0 * tau)
    align = float(d2.mean())
    align_se = float(d2.std(ddof=1) / math.sqrt(len(d2))) if len(d2) > 1 else 0.0
    groups = np.array_split(np.arange(len(U_plus)), len(pools))
    means = []
    for g, pool in zip(groups, pools):
        vals = []
        for chunk in np.array_split(g, max(1, len(g) // 512)):
            vals.append(_log_mean_exp(U_plus[chunk] @ pool.T, tau))
        means.append(float(np.concatenate(vals).mean()))
    means = np.array(means)
    unif = float(means.mean())
    unif_se = float(means.std(ddof=1) / math.sqrt(len(means))) if len(means) > 1 else 0.0
    return LimitingLossEstimate(align, unif, align_se, unif_se)


def limiting_loss(
    enc, spec, n_mc: int, tau: float, rng, n_groups: int = 20, pool_size: int = 2000
) -> LimitingLossEstimate:
    """Monte Carlo estimate of the large-``m`` InfoNCE limit, split into align + unif.

    ``spec`` is a :class:`~ifmlab.synthdata.SyntheticDatasetSpec` or any
    object with ``sample_pairs(n, rng)`` and ``sample(n, rng)``.
    """
    if n_mc < 100:
        raise UsageError("n_mc must be >= 100")
    X1, X2 = _pairs(spec, n_mc, rng)
    U = _embed(enc, X1)
    U_plus = _embed(enc, X2)
    pools = [_embed(enc, _singles(spec, pool_size, rng)) for _ in range(n_groups)]
    return limiting_loss_from_embeddings(U, U_plus, pools, tau)


def collapse_unif(tau: float) -> float:
    """Uniformity term of an encoder that maps everything to one point."""
    return 1.0 / tau


def finite_m_gap(enc, spec, tau: float, m_values: Sequence[int], rng, n_batches: int = 256):
    """Offset finite-``m`` InfoNCE, ``E L_m - log m + 1/tau``, for each ``m``.

    The offset is what converges to the limiting loss: with unit embeddings
    the positive logit is ``1/tau - |f(x) - f(x+)|^2 / (2 tau)``.
    Returns a list of ``(m, gap, standard_error)``.
    """
    m_values = list(m_values)
    if any(b <= a for a, b in zip(m_values, m_values[1:])):
        raise UsageError("m_values must be strictly increasing")
    out = []
    for m in m_values:
        X1, X2 = _pairs(spec, n_batches, rng)
        V = _embed(enc, X1)
        Vp = _embed(enc, X2)
        N = _embed(enc, _singles(spec, n_batches * m, rng)).reshape(n_batches, m, -1)
        pos = np.sum(V * Vp, axis=1) / tau
        neg = np.einsum("bd,bmd->bm", V, N) / tau
        logits = np.concatenate([pos[:, None], neg], axis=1)
        L = log_sum_exp_rows(logits) - pos
        g = L - math.log(m) + 1.0 / tau
        out.append((m, float(g.mean()), float(g.std(ddof=1) / math.sqrt(n_batches))))
    return out


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def sweep_correlate(results: Sequence[ProbeResult]) -> list[float]:
    """Per-feature Pearson correlation between evaluation loss and readout error."""
    if len(results) < 3:
        raise UsageError("need at least three results to correlate")
    n = len(results[0].accuracy)
    if any(len(r.accuracy) != n for r in results):
        raise UsageError("results disagree on the number of features")
    losses = [r.eval_loss for r in results]
    return [pearson(losses, [1.0 - r.accuracy[j] for r in results]) for j in range(n)]


def metrics_header(n_features: int) -> list[str]:
    return (
        ["run_id", "tau", "beta", "eps", "alpha", "variant", "seed"]
        + [f"acc_{j}" for j in range(n_features)]
        + ["eval_loss"]
    )


def format_metrics_row(run_id, loss_cfg, seed, result: ProbeResult) -> list[str]:
    return [
        str(run_id),
        repr(float(loss_cfg.tau)),
        repr(float(loss_cfg.beta)),
        repr(float(loss_cfg.eps_pos)),
        repr(float(loss_cfg.alpha)),
        loss_cfg.variant,
        str(int(seed)),
        *[repr(float(a)) for a in result.accuracy],
        repr(float(result.eval_loss)),
    ]


def write_metrics(rows: Sequence[Sequence[str]], n_features: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics_header(n_features))
    w.writerows(rows)
    return buf.getvalue()


def read_metrics(text: str) -> list[dict]:
    """Parse a metrics table into dicts with numeric fields converted."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration as exc:
        raise FormatError("empty metrics table") from exc
    if header[:7] != metrics_header(0)[:7] or header[-1] != "eval_loss":
        raise FormatError(f"unexpected metrics header: {header}")
    n_feat = len(header) - 8
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise FormatError(f"line {lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            rec = {
                "run_id": row[0],
                "tau": float(row[1]),
                "beta": float(row[2]),
                "eps": float(row[3]),
                "alpha": float(row[4]),
                "variant": row[5],
                "seed": int(row[6]),
                "accuracy": tuple(float(v) for v in row[7 : 7 + n_feat]),
                "eval_loss": float(row[-1]),
            }
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
        out.append(rec)
    return out
