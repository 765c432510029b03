"""Temperature decides which of two competing features gets encoded.

The two-feature data pairs a loud feature with a quiet one. Training at a low
and at a high temperature with everything else fixed shows the loud feature
winning at high temperature and the quiet feature gaining at low temperature.

    python demos/temperature_tradeoff.py
"""
from ifmlab.evaluation import readout
from ifmlab.losses import LossConfig
from ifmlab.numerics import make_rng
from ifmlab.synthdata import two_feature_spec
from ifmlab.training import TrainSettings, train_encoder

spec = two_feature_spec()
settings = TrainSettings(steps=600)
for tau in (0.1, 1.0):
    enc = train_encoder(spec, LossConfig(tau=tau), settings, seed=0).encoder
    res = readout(enc, spec, make_rng(100))
    print(f"tau={tau:<4}  loud {res.accuracy[0]:.2f}  quiet {res.accuracy[1]:.2f}  eval loss {res.eval_loss:.3f}")
