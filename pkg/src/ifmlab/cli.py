"""Command-line runner: ``ifmlab <command> [--config PATH] [--seed N] [--out DIR]``.

Commands
    gen-data      write a probe dataset as text
    train         train one encoder, write its checkpoint and a metrics row
    probe         linear readout of a saved checkpoint
    sweep         train over a grid of loss settings and seeds (resumable)
    verify        run the built-in property checks; nonzero exit on failure
    retrieve      nearest-neighbour retrieval of perturbed positives
    robust-split  build robust / non-robust datasets by FGSM and re-probe
    report        summarize a metrics table across seeds

Every output path lives under ``--out`` (default: the config's ``out``).
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import synthdata
from .config import RunConfig
from .encoder import load_checkpoint, save_checkpoint
from .errors import IFMError
from .evaluation import (
    ProbeResult,
    _embed,
    format_metrics_row,
    read_metrics,
    readout,
    split_indices,
    sweep_correlate,
    train_probe,
    write_metrics,
)
from .latent_analysis import (
    MemoryBank,
    fgsm_split,
    nn_retrieve,
    permuted_control,
    refinetune_eval,
)
from .numerics import make_rng
from .training import train_encoder
from . import verify

READOUT_SEED_OFFSET = 100


def train_and_probe(cfg: RunConfig):
    """Train with ``cfg`` and probe every feature; deterministic in ``cfg.seed``."""
    spec = cfg.dataset_spec()
    result = train_encoder(spec, cfg.loss_config(), cfg.train_settings(), cfg.seed)
    rng = make_rng(cfg.seed + READOUT_SEED_OFFSET)
    probe = readout(result.encoder, spec, rng, cfg.probe.n_samples, cfg.probe.augment)
    return result.encoder, probe


def _write(path: Path, data, mode="w"):
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        with open(path, mode, encoding="utf-8") as fh:
            fh.write(data)


def _load_encoder(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IFMError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return load_checkpoint(data)


def _checkpoint_for(args, out: Path) -> str:
    return args.checkpoint or str(out / "encoder.ckpt")


def _check_dims(enc, spec):
    if enc.in_dim != spec.input_dim:
        raise IFMError(
            f"checkpoint expects inputs of dim {enc.in_dim} but the dataset renders {spec.input_dim}; "
            "use the config the checkpoint was trained with"
        )


def cmd_gen_data(cfg: RunConfig, out: Path, args) -> int:
    spec = cfg.dataset_spec()
    n = args.n or cfg.probe.n_samples
    X, Z = synthdata.probe_dataset(spec, n, make_rng(cfg.seed), augment=not args.clean)
    path = out / "dataset.csv"
    _write(path, synthdata.export_dataset(X, Z))
    print(f"wrote {n} samples to {path}")
    return 0


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    enc, res = train_and_probe(cfg)
    row = format_metrics_row(cfg.run_id(), cfg.loss_config(), cfg.seed, res)
    _write(out / "encoder.ckpt", save_checkpoint(enc))
    _write(out / "metrics.csv", write_metrics([row], len(res.accuracy)))
    _write(out / "config.json", cfg.to_json())
    print(",".join(row))
    return 0


def cmd_probe(cfg: RunConfig, out: Path, args) -> int:
    spec = cfg.dataset_spec()
    enc = _load_encoder(_checkpoint_for(args, out))
    _check_dims(enc, spec)
    res = readout(enc, spec, make_rng(cfg.seed + READOUT_SEED_OFFSET), cfg.probe.n_samples, cfg.probe.augment)
    row = format_metrics_row(cfg.run_id(), cfg.loss_config(), cfg.seed, res)
    _write(out / "probe.csv", write_metrics([row], len(res.accuracy)))
    print(",".join(row))
    return 0


def cmd_sweep(cfg: RunConfig, out: Path, args) -> int:
    spec = cfg.dataset_spec()
    path = out / "metrics.csv"
    done = set()
    if path.exists():
        done = {r["run_id"] for r in read_metrics(path.read_text(encoding="utf-8"))}
    else:
        _write(path, write_metrics([], spec.n_features))
    runs = list(cfg.sweep.runs(cfg))
    for i, run in enumerate(runs, start=1):
        rid = run.run_id()
        if rid in done:
            print(f"[{i}/{len(runs)}] skip {rid}")
            continue
        enc, res = train_and_probe(run)
        row = format_metrics_row(rid, run.loss_config(), run.seed, res)
        line = write_metrics([row], spec.n_features).split("\n", 1)[1]
        _write(path, line, mode="a")
        _write(out / "checkpoints" / f"{rid}.ckpt", save_checkpoint(enc))
        done.add(rid)
        print(f"[{i}/{len(runs)}] {rid} acc={[round(a, 3) for a in res.accuracy]}")
    return 0


def cmd_verify(cfg: RunConfig, out: Path, args) -> int:
    failed = 0
    for check in verify.ALL_CHECKS:
        r = check()
        print(r.line())
        failed += not r.passed
    print(f"{len(verify.ALL_CHECKS) - failed} passed, {failed} failed")
    return 1 if failed else 0


def cmd_retrieve(cfg: RunConfig, out: Path, args) -> int:
    spec = cfg.dataset_spec()
    enc = _load_encoder(_checkpoint_for(args, out))
    _check_dims(enc, spec)
    rng = make_rng(cfg.seed)
    Xb, Zb = synthdata.probe_dataset(spec, cfg.analysis.bank_size, rng)
    bank = MemoryBank(_embed(enc, Xb))
    X1, X2, Z = synthdata.sample_pairs(spec, 1, rng)
    v, vp = _embed(enc, X1)[0], _embed(enc, X2)[0]
    lines = ["eps,neighbour_id,sim_to_anchor," + ",".join(f"y{j}" for j in range(spec.n_features))]
    print(f"anchor latent {Z[0].tolist()}")
    for eps in cfg.analysis.retrieve_eps:
        q = vp - eps * v
        if not np.any(q):
            q = vp - (eps + 1e-9) * v
        nid = nn_retrieve(bank, q, 1)[0]
        sim = float(bank.embeddings[nid] @ v)
        lines.append(f"{eps!r},{nid},{sim!r}," + ",".join(str(int(z)) for z in Zb[nid]))
        print(f"eps={eps:<6} neighbour {nid:5d} sim(v)={sim:+.4f} latent {Zb[nid].tolist()}")
    _write(out / "retrieval.csv", "\n".join(lines) + "\n")
    return 0


def cmd_robust_split(cfg: RunConfig, out: Path, args) -> int:
    spec = cfg.dataset_spec()
    a = cfg.analysis
    enc = _load_encoder(_checkpoint_for(args, out))
    _check_dims(enc, spec)
    rng = make_rng(cfg.seed)
    X, Z = synthdata.probe_dataset(spec, a.n_samples, rng, augment=False)
    y = Z[:, a.feature]
    c = spec.cardinalities[a.feature]
    tr, te = split_indices(len(y), rng)
    probe = train_probe(_embed(enc, X[tr]), y[tr], c)
    split = fgsm_split(enc, probe, X[tr], y[tr], rng, a.eps_step, a.max_steps)
    _write(out / "robust_split.csv", split.export())
    acc_d, acc_r, acc_nr = refinetune_eval(enc, split, (X[tr], y[tr]), (X[te], y[te]), c)
    acc_perm = permuted_control(enc, (X[tr], y[tr]), (X[te], y[te]), c, rng)
    print(f"feature {a.feature}: kept {len(split.labels)}/{split.n_source}, "
          f"mean steps {split.mean_steps:.2f}")
    print(f"clean-test accuracy  D {acc_d:.3f}  D_R {acc_r:.3f}  D_NR {acc_nr:.3f}  "
          f"permuted {acc_perm:.3f}  chance {1.0 / c:.3f}")
    return 0


def summarize(records) -> list[str]:
    """Per-setting mean and std across seeds, plus loss/error correlations."""
    groups: dict = {}
    for r in records:
        key = (r["tau"], r["beta"], r["eps"], r["alpha"], r["variant"])
        groups.setdefault(key, []).append(r)
    lines = []
    for key in sorted(groups):
        rows = groups[key]
        acc = np.array([r["accuracy"] for r in rows])
        loss = np.array([r["eval_loss"] for r in rows])
        cells = "  ".join(
            f"acc_{j} {acc[:, j].mean():.3f}+/-{acc[:, j].std():.3f}" for j in range(acc.shape[1])
        )
        lines.append(
            f"tau={key[0]} beta={key[1]} eps={key[2]} alpha={key[3]} {key[4]} "
            f"(n={len(rows)})  {cells}  loss {loss.mean():.4f}+/-{loss.std():.4f}"
        )
    if len(records) >= 3:
        results = [ProbeResult(r["accuracy"], (), r["eval_loss"]) for r in records]
        try:
            corr = sweep_correlate(results)
            lines.append(
                "corr(eval_loss, error): " + "  ".join(f"f{j} {c:+.3f}" for j, c in enumerate(corr))
            )
        except IFMError as exc:
            lines.append(f"corr(eval_loss, error): undefined ({exc})")
    return lines


def cmd_report(cfg: RunConfig, out: Path, args) -> int:
    path = Path(args.metrics) if args.metrics else out / "metrics.csv"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IFMError(f"cannot read metrics table {path}: {exc.strerror}") from exc
    lines = summarize(read_metrics(text))
    print("\n".join(lines))
    _write(out / "report.txt", "\n".join(lines) + "\n")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "probe": cmd_probe,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
    "retrieve": cmd_retrieve,
    "robust-split": cmd_robust_split,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, metavar="N", help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    parser = argparse.ArgumentParser(prog="ifmlab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        line.split()[0]: line.split(None, 1)[1]
        for line in __doc__.split("Commands\n", 1)[1].split("\n\n")[0].splitlines()
    }
    ps = {name: sub.add_parser(name, parents=[common], help=helps[name]) for name in COMMANDS}
    ps["gen-data"].add_argument("--n", type=int, help="number of samples")
    ps["gen-data"].add_argument("--clean", action="store_true", help="skip augmentation")
    for name in ("probe", "retrieve", "robust-split"):
        ps[name].add_argument("--checkpoint", metavar="PATH", help="default: OUT/encoder.ckpt")
    ps["report"].add_argument("--metrics", metavar="PATH", help="default: OUT/metrics.csv")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        if out.exists() and not os.access(out, os.W_OK):
            raise IFMError(f"output directory {out} is not writable")
        return COMMANDS[args.command](cfg, out, args)
    except (IFMError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
