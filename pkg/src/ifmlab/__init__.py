"""Contrastive objectives with implicit feature modification, and tools to study feature suppression."""

from .errors import ConfigError, DegenerateInputError, FormatError, IFMError, UsageError
from .numerics import (
    dot,
    l2_normalize,
    log_sum_exp,
    make_rng,
    norm,
    pearson,
)
from .losses import (
    EmbeddingBatch,
    LossConfig,
    LossGrad,
    combined_grads,
    combined_objective,
    hardness_weighted_grads,
    hardness_weighted_pointwise,
    hardness_weights,
    ifm_grads,
    ifm_optimal_updates,
    ifm_pointwise,
    ifm_postnorm_grads,
    ifm_postnorm_pointwise,
    infonce_grads,
    infonce_minibatch,
    infonce_pointwise,
    nt_xent_objective,
    nt_xent_prenorm,
    prenorm_ascent,
    prenorm_direction,
    prenorm_grads,
    prenorm_loss,
)
from .encoder import Adam, Encoder, Layer, adam_step, load_checkpoint, save_checkpoint
from .synthdata import (
    ContrastiveBatch,
    SyntheticDatasetSpec,
    default_spec,
    export_dataset,
    load_dataset,
    render,
    sample_batch,
    sample_conditioned_batch,
    sample_pairs,
    sphere_latents,
    two_feature_spec,
)
from .training import TrainResult, TrainSettings, train_encoder
from .evaluation import (
    LimitingLossEstimate,
    LinearProbe,
    ProbeResult,
    finite_m_gap,
    limiting_loss,
    readout,
    suppression_score,
    sweep_correlate,
    train_probe,
)
from .latent_analysis import (
    MemoryBank,
    RobustSplit,
    eps_ball_oracle,
    fgsm_split,
    nn_retrieve,
    permuted_control,
    refinetune_eval,
)
from .theorycheck import (
    OracleEncoder,
    SphereFeatureModel,
    build_oracle,
    prop1_check,
    prop2_check,
    sphere_unif,
)
from .config import RunConfig

__version__ = "0.1.0"
