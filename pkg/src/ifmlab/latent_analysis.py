"""Search-based checks and feature-level analyses in embedding space.

* :func:`eps_ball_oracle` maximizes InfoNCE over l2 balls by projected ascent,
  without using the closed form, so it can cross-check it.
* :func:`nn_retrieve` visualizes a synthesized embedding by its nearest
  neighbour in a memory bank. "Nearest" means the *highest* cosine
  similarity. A literal argmin of similarity would return the farthest point.
* :func:`fgsm_split` and :func:`refinetune_eval` build and score datasets of
  robust and non-robust features via repeated sign-gradient input attacks on
  a trained linear probe.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from .errors import UsageError
from .evaluation import LinearProbe, _embed, train_probe
from .losses import EmbeddingBatch, LossConfig, infonce_grads, infonce_pointwise
from .numerics import FLOAT, as_vector, make_rng
from . import synthdata


def _random_in_ball(rng, shape, radius):
    d = shape[-1]
    g = rng.normal(size=shape)
    g /= np.linalg.norm(g, axis=-1, keepdims=True)
    r = rng.random(shape[:-1] + (1,)) ** (1.0 / d)
    return g * r * np.asarray(radius).reshape(shape[:-1] + (1,))


def _project(delta, radius):
    n = np.linalg.norm(delta, axis=-1, keepdims=True)
    r = np.asarray(radius, dtype=FLOAT).reshape(n.shape)
    return delta * np.where(n > r, r / np.where(n > 0, n, 1.0), 1.0)


def eps_ball_oracle(
    b: EmbeddingBatch,
    cfg: LossConfig,
    restarts: int = 5,
    steps: int = 200,
    rng: np.random.Generator | None = None,
    step_frac: float = 1.0 / 20.0,
) -> float:
    """Largest InfoNCE found over ``|d+| <= eps_pos``, ``|d_i| <= eps_i`` by projected ascent.

    Every vector takes normalized-gradient steps of ``step_frac * eps`` and is
    projected back onto its ball. The first restart starts at zero, the rest
    at uniform points in the balls. Returns the best feasible value seen.
    """
    if cfg.variant != "standard":
        raise UsageError("the ball oracle targets the standard variant")
    tau = cfg.tau
    radii = np.concatenate([[cfg.eps_pos], cfg.eps_vector(b.m)])
    best = infonce_pointwise(b, tau)
    if not np.any(radii > 0):
        return best
    rng = make_rng(0) if rng is None else rng
    base = np.vstack([b.positive, b.negatives])
    h = step_frac * radii
    for r in range(restarts):
        delta = np.zeros_like(base) if r == 0 else _random_in_ball(rng, base.shape, radii)
        for _ in range(steps):
            moved = base + delta
            cur = b.with_vectors(positive=moved[0], negatives=moved[1:])
            val = infonce_pointwise(cur, tau, check_unit=False)
            best = max(best, val)
            g = infonce_grads(cur, tau, check_unit=False)
            G = np.vstack([g.d_positive, g.d_negatives])
            gn = np.linalg.norm(G, axis=1, keepdims=True)
            G = np.divide(G, gn, out=np.zeros_like(G), where=gn > 0)
            delta = _project(delta + h[:, None] * G, radii)
        moved = base + delta
        final = b.with_vectors(positive=moved[0], negatives=moved[1:])
        best = max(best, infonce_pointwise(final, tau, check_unit=False))
    return best


@dataclass
class MemoryBank:
    embeddings: np.ndarray
    ids: list = field(default_factory=list)

    def __post_init__(self):
        E = np.asarray(self.embeddings, dtype=FLOAT)
        if E.size == 0:
            E = E.reshape(0, E.shape[-1] if E.ndim == 2 else 0)
        if E.ndim != 2:
            raise UsageError("memory bank embeddings must be (n, d)")
        ids = list(range(E.shape[0])) if not self.ids else list(self.ids)
        if len(ids) != E.shape[0]:
            raise UsageError("ids and embeddings must have equal length")
        if E.shape[0] and np.max(np.abs(np.linalg.norm(E, axis=1) - 1.0)) > 1e-9:
            raise UsageError("memory bank embeddings must be unit-norm")
        self.embeddings = E
        self.ids = ids

    def __len__(self):
        return len(self.ids)


def nn_retrieve(bank: MemoryBank, query, k: int = 1) -> list:
    """Ids of the ``k`` most cosine-similar bank entries, best first; ties go to the lowest id."""
    if len(bank) == 0:
        raise UsageError("memory bank is empty")
    q = as_vector(query, "query")
    if q.shape[0] != bank.embeddings.shape[1]:
        raise UsageError("query dimension does not match the bank")
    nq = np.linalg.norm(q)
    if nq == 0.0:
        raise UsageError("query is the zero vector")
    sims = bank.embeddings @ (q / nq)
    order = sorted(range(len(bank)), key=lambda i: (-sims[i], bank.ids[i]))
    return [bank.ids[i] for i in order[: max(0, k)]]


def retrieval_similarities(bank: MemoryBank, query) -> np.ndarray:
    q = as_vector(query, "query")
    return bank.embeddings @ (q / np.linalg.norm(q))


@dataclass
class RobustSplit:
    """Adversarial inputs paired with their true labels (robust) and targets (non-robust)."""

    x_adv: np.ndarray
    labels: np.ndarray  # true labels: the robust dataset D_R = (x_adv, labels)
    targets: np.ndarray  # hallucinated labels: D_NR = (x_adv, targets)
    steps: np.ndarray  # FGSM steps taken per kept sample
    n_dropped: int
    n_source: int

    @property
    def robust(self):
        return self.x_adv, self.labels

    @property
    def non_robust(self):
        return self.x_adv, self.targets

    @property
    def success_rate(self) -> float:
        return 1.0 - self.n_dropped / self.n_source if self.n_source else 0.0

    @property
    def mean_steps(self) -> float:
        return float(np.mean(self.steps)) if len(self.steps) else float("nan")

    def export(self) -> str:
        """Dataset text format with trailing ``target`` and ``steps`` columns."""
        return synthdata.export_dataset(
            self.x_adv, self.labels[:, None], extra={"target": self.targets, "steps": self.steps}
        )


def probe_input_grad(enc, probe: LinearProbe, X: np.ndarray, targets) -> np.ndarray:
    """Gradient of the per-sample probe cross-entropy w.r.t. the encoder inputs."""
    E, tape = enc.forward(X)
    dE = probe.loss_grad(E, targets)
    _, dX = enc.backward(tape, dE)
    return dX


def fgsm_split(
    enc,
    probe: LinearProbe,
    X,
    y,
    rng: np.random.Generator,
    eps_step: float = 0.01,
    max_steps: int = 50,
) -> RobustSplit:
    """Push each input toward a random target class with repeated FGSM steps.

    ``x_k = x_{k-1} - eps_step * sign(grad_x CE(probe(enc(x_{k-1})), t))``
    until the probe predicts ``t`` or ``max_steps`` is reached. Samples that
    never reach their target are dropped and counted.
    """
    X = np.array(X, dtype=FLOAT)
    y = np.asarray(y)
    n = X.shape[0]
    n_classes = probe.W.shape[1]
    targets = rng.integers(0, n_classes, size=n)
    steps = np.zeros(n, dtype=int)
    done = probe.predict(_embed(enc, X)) == targets
    for k in range(1, max_steps + 1):
        active = np.nonzero(~done)[0]
        if active.size == 0:
            break
        G = probe_input_grad(enc, probe, X[active], targets[active])
        X[active] -= eps_step * np.sign(G)
        steps[active] = k
        done[active] = probe.predict(_embed(enc, X[active])) == targets[active]
    keep = done
    return RobustSplit(
        X[keep], y[keep], targets[keep], steps[keep], int(n - keep.sum()), n
    )


def refinetune_eval(enc, split: RobustSplit, train, clean_test, n_classes: int, iters: int = 500):
    """Held-out clean accuracy of fresh probes trained on D, D_R and D_NR.

    ``train`` and ``clean_test`` are ``(X, y)`` pairs of unperturbed inputs.
    Returns ``(acc_D, acc_R, acc_NR)``.
    """
    E_test = _embed(enc, clean_test[0])
    y_test = np.asarray(clean_test[1])
    out = []
    for X, labels in (train, split.robust, split.non_robust):
        probe = train_probe(_embed(enc, X), labels, n_classes, iters=iters)
        out.append(probe.accuracy(E_test, y_test))
    return tuple(out)


def permuted_control(
    enc, train, clean_test, n_classes: int, rng, n_perm: int = 20, iters: int = 500
) -> float:
    """Mean clean-test accuracy of probes trained on randomly permuted labels (should be chance).

    For a feature the embedding separates perfectly, one permuted probe maps
    whole classes to arbitrary labels, so a single run lands on a multiple of
    ``1/n_classes``; averaging over ``n_perm`` permutations removes that
    granularity.
    """
    E_tr = _embed(enc, train[0])
    E_te = _embed(enc, clean_test[0])
    y = np.asarray(train[1])
    accs = []
    for _ in range(n_perm):
        probe = train_probe(E_tr, rng.permutation(y), n_classes, iters=iters)
        accs.append(probe.accuracy(E_te, clean_test[1]))
    return float(np.mean(accs))
