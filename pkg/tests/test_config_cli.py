import json

import numpy as np
import pytest

from ifmlab.cli import main, summarize
from ifmlab.config import RunConfig
from ifmlab.errors import ConfigError
from ifmlab.evaluation import read_metrics
from ifmlab.synthdata import load_dataset

TINY = {
    "schema_version": 1,
    "seed": 0,
    "encoder": {"hidden": [16], "out_dim": 4},
    "training": {"epochs": 2, "steps_per_epoch": 10, "batch_pairs": 16},
    "probe": {"n_samples": 200},
    "analysis": {"n_samples": 200, "bank_size": 100, "max_steps": 5},
}


def write_config(tmp_path, **overrides):
    data = json.loads(json.dumps(TINY))
    for key, value in overrides.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    data["out"] = str(tmp_path / "out")
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return str(path)


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        assert RunConfig.from_json(cfg.to_json()) == cfg

    def test_full_round_trip(self):
        data = dict(TINY, loss={"tau": 0.2, "eps": 0.1, "beta": 1}, sweep={"grid": {"tau": [0.1, 1]}, "seeds": [0, 1]})
        cfg = RunConfig.from_dict(data)
        assert RunConfig.from_json(cfg.to_json()) == cfg
        assert cfg.loss.beta == 1.0
        assert cfg.train_settings().steps == 20
        assert cfg.loss_config().eps_neg == 0.1

    @pytest.mark.parametrize(
        "data,field",
        [
            ({"schema_version": 1, "loss": {"temperature": 0.5}}, "loss.temperature"),
            ({"schema_version": 1, "extra": 1}, "extra"),
            ({"schema_version": 2}, "schema_version"),
            ({"schema_version": 1, "loss": {"tau": "hot"}}, "loss.tau"),
            ({"schema_version": 1, "loss": {"tau": 0}}, "loss.tau"),
            ({"schema_version": 1, "loss": {"eps": -0.1}}, "loss.eps"),
            ({"schema_version": 1, "training": {"epochs": True}}, "training.epochs"),
            ({"schema_version": 1, "training": {"held_features": [0, 1, 2]}}, "training.held_features"),
            ({"schema_version": 1, "dataset": {"preset": "imagenet"}}, "dataset.preset"),
            ({"schema_version": 1, "encoder": {"hidden": [16, "x"]}}, "encoder.hidden[1]"),
            ({"schema_version": 1, "sweep": {"grid": {"lr": [0.1]}}}, "sweep.grid.lr"),
            ({"schema_version": 1, "sweep": {"grid": {"tau": [0.1, -1.0]}}}, "sweep.grid.tau"),
            ({"schema_version": 1, "analysis": {"feature": 3}}, "analysis.feature"),
        ],
    )
    def test_errors_name_the_field(self, data, field):
        with pytest.raises(ConfigError) as info:
            RunConfig.from_dict(data)
        assert info.value.field == field

    def test_malformed_json(self):
        with pytest.raises(ConfigError):
            RunConfig.from_json("{not json")

    def test_sweep_runs_cartesian_product(self):
        cfg = RunConfig.from_dict(
            {"schema_version": 1, "sweep": {"grid": {"tau": [0.1, 1.0], "beta": [0, 2]}, "seeds": [0, 1, 2]}}
        )
        runs = list(cfg.sweep.runs(cfg))
        assert len(runs) == 12
        assert len({r.run_id() for r in runs}) == 12

    def test_custom_preset(self):
        cfg = RunConfig.from_dict(
            {"schema_version": 1, "dataset": {"preset": "custom", "cardinalities": [3, 4], "saliences": [1, 2]},
             "analysis": {"feature": 1}}
        )
        assert cfg.dataset_spec().cardinalities == (3, 4)


class TestCommands:
    def test_train_is_bitwise_reproducible(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["train", "--config", cfg]) == 0
        out = tmp_path / "out"
        first = ((out / "metrics.csv").read_bytes(), (out / "encoder.ckpt").read_bytes())
        assert main(["train", "--config", cfg]) == 0
        assert first == ((out / "metrics.csv").read_bytes(), (out / "encoder.ckpt").read_bytes())
        assert RunConfig.load(out / "config.json") == RunConfig.load(cfg)

    def test_seed_flag_changes_the_run(self, tmp_path):
        cfg = write_config(tmp_path)
        main(["train", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["train", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "1"])
        a = read_metrics((tmp_path / "a" / "metrics.csv").read_text())[0]
        b = read_metrics((tmp_path / "b" / "metrics.csv").read_text())[0]
        assert (a["seed"], b["seed"]) == (0, 1)
        assert a["accuracy"] != b["accuracy"]

    def test_probe_retrieve_and_split_use_the_checkpoint(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        out = tmp_path / "out"
        assert main(["train", "--config", cfg]) == 0
        assert main(["probe", "--config", cfg]) == 0
        trained = read_metrics((out / "metrics.csv").read_text())[0]
        probed = read_metrics((out / "probe.csv").read_text())[0]
        assert probed["accuracy"] == trained["accuracy"]
        assert main(["retrieve", "--config", cfg]) == 0
        assert (out / "retrieval.csv").read_text().startswith("eps,neighbour_id")
        assert main(["robust-split", "--config", cfg]) == 0
        X, y, extra = load_dataset((out / "robust_split.csv").read_text())
        assert set(extra) == {"target", "steps"}
        assert "permuted" in capsys.readouterr().out

    def test_gen_data(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["gen-data", "--config", cfg, "--n", "25", "--clean"]) == 0
        X, Y, _ = load_dataset((tmp_path / "out" / "dataset.csv").read_text())
        assert X.shape == (25, 32) and Y.shape == (25, 3)

    def test_sweep_and_resume(self, tmp_path, capsys):
        cfg = write_config(tmp_path, sweep={"grid": {"tau": [0.1, 1.0]}, "seeds": [0, 1, 2]})
        out = tmp_path / "out"
        assert main(["sweep", "--config", cfg]) == 0
        rows = read_metrics((out / "metrics.csv").read_text())
        assert len(rows) == 6
        assert len(list((out / "checkpoints").iterdir())) == 6
        # drop the last row: a rerun trains only that run and skips the rest
        lines = (out / "metrics.csv").read_text().splitlines(keepends=True)
        (out / "metrics.csv").write_text("".join(lines[:-1]))
        capsys.readouterr()
        assert main(["sweep", "--config", cfg]) == 0
        log = capsys.readouterr().out
        assert log.count(" skip ") == 5
        again = read_metrics((out / "metrics.csv").read_text())
        assert again == rows

    def test_report(self, tmp_path, capsys):
        cfg = write_config(tmp_path, sweep={"grid": {"tau": [0.1, 1.0]}, "seeds": [0, 1]})
        main(["sweep", "--config", cfg])
        capsys.readouterr()
        assert main(["report", "--config", cfg]) == 0
        text = capsys.readouterr().out
        assert "tau=0.1" in text and "tau=1.0" in text and "(n=2)" in text
        assert "corr(eval_loss, error)" in text
        assert (tmp_path / "out" / "report.txt").exists()

    def test_verify_passes(self, capsys):
        assert main(["verify"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert out.strip().endswith("0 failed")

    def test_missing_files_are_reported(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2
        cfg = write_config(tmp_path)
        assert main(["probe", "--config", cfg, "--checkpoint", str(tmp_path / "none.ckpt")]) == 2
        assert main(["report", "--config", cfg]) == 2
        err = capsys.readouterr().err
        assert err.count("error:") == 3

    def test_checkpoint_from_other_dataset(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        main(["train", "--config", cfg])
        other = write_config(tmp_path, dataset={"preset": "two_feature"})
        assert main(["probe", "--config", other, "--checkpoint", str(tmp_path / "out" / "encoder.ckpt")]) == 2
        assert "dim" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert main(["probe", "--config", cfg, "--checkpoint", str(bad)]) == 2


class TestSummarize:
    def test_groups_by_setting(self):
        recs = [
            {"tau": t, "beta": 0.0, "eps": 0.0, "alpha": 1.0, "variant": "standard",
             "accuracy": (a, 1 - a), "eval_loss": l}
            for t, a, l in [(0.1, 0.5, 3.0), (0.1, 0.7, 2.0), (1.0, 0.9, 1.0)]
        ]
        lines = summarize(recs)
        assert lines[0].startswith("tau=0.1") and "(n=2)" in lines[0]
        assert "acc_0 0.600+/-0.100" in lines[0]
        assert lines[-1].startswith("corr")
        # errors 0.5, 0.3, 0.1 rise with losses 3, 2, 1 on feature 0
        np.testing.assert_allclose(float(lines[-1].split()[3]), 1.0, atol=1e-3)
