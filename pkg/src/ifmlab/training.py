"""Contrastive training loop for the small encoder on synthetic data."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import Adam, Encoder, adam_step
from .losses import LossConfig, nt_xent_objective, nt_xent_prenorm
from .numerics import make_rng
from .synthdata import SyntheticDatasetSpec, sample_pairs


@dataclass
class TrainSettings:
    hidden: tuple = (64, 64)
    out_dim: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-6
    batch_pairs: int = 128
    steps: int = 1000
    held_features: tuple = ()
    prenorm_steps: int = 5


@dataclass
class TrainResult:
    encoder: Encoder
    losses: list = field(default_factory=list)


def init_encoder(spec: SyntheticDatasetSpec, settings: TrainSettings, seed: int) -> Encoder:
    dims = [spec.input_dim, *settings.hidden, settings.out_dim]
    return Encoder.init(dims, make_rng(seed))


def train_encoder(
    spec: SyntheticDatasetSpec,
    loss_cfg: LossConfig,
    settings: TrainSettings,
    seed: int,
    encoder: Encoder | None = None,
) -> TrainResult:
    """Train with the combined objective; bitwise reproducible for a fixed seed.

    The encoder init and the data stream use separate generators derived from
    ``seed`` so that changing the loss never changes the initial weights.
    """
    enc = init_encoder(spec, settings, seed) if encoder is None else encoder
    rng = make_rng(seed + 0x9E3779B9)
    opt = Adam(lr=settings.lr, weight_decay=settings.weight_decay)
    history = []
    for _ in range(settings.steps):
        X1, X2, _ = sample_pairs(spec, settings.batch_pairs, rng, settings.held_features)
        X = np.vstack([X1, X2])
        U, tape = enc.forward(X)
        if loss_cfg.variant == "pre_norm":
            loss, dZ = nt_xent_prenorm(tape.raw, loss_cfg, settings.prenorm_steps)
            grads, _ = enc.backward(tape, d_raw=dZ)
        else:
            loss, dU = nt_xent_objective(U, loss_cfg)
            grads, _ = enc.backward(tape, dU)
        adam_step(opt, enc, grads)
        history.append(loss)
    return TrainResult(enc, history)
