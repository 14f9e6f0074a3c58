import csv
import json

import pytest

from kernreg.cli import main
from kernreg.config import ConfigError, RunConfig, apply_override, parse_config

BLOBS = {
    "dataset": {"name": "gaussian-blobs-2d", "n": 120, "seed": 0, "options": {"separation": 3.0}},
    "model": {"preset": "mlp", "options": {"hidden": [8]}},
    "train": {"optimizer": "sgd", "lr": 0.05, "epochs": 2, "batch_size": 32},
    "penalties": [{"kind": "weight_decay", "lam": 0.001}],
    "evaluation": {"epsilons": [0.0, 0.1], "steps": 10, "norm_steps": 5},
    "seed": 0,
}


def _write(tmp_path, cfg, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=2))
    return str(path)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _cli(*args):
    return main([str(a) for a in args])


def test_defaults_parse():
    cfg = parse_config("")
    assert isinstance(cfg, RunConfig)
    assert cfg.train.halve_every == 40 and cfg.evaluation.steps == 40


def test_unknown_key_reports_path_and_line():
    text = '{\n  "train": {\n    "lr": 0.1,\n    "epochz": 3\n  }\n}\n'
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.path == "train.epochz"
    assert err.value.line == 4


def test_bad_penalty_kind_and_value():
    with pytest.raises(ConfigError) as err:
        parse_config(json.dumps({"penalties": [{"kind": "weight_decay", "lam": -1}]}))
    assert err.value.path.startswith("penalties.0")
    with pytest.raises(ConfigError):
        parse_config(json.dumps({"penalties": [{"kind": "nope"}]}))


def test_invalid_json_line():
    with pytest.raises(ConfigError) as err:
        parse_config('{\n "seed": 1,\n oops\n}')
    assert err.value.line == 3


def test_overrides():
    data = {"penalties": [{"kind": "weight_decay", "lam": 0.1}]}
    apply_override(data, "penalties.0.lam=0.5")
    apply_override(data, "train.lr=0.2")
    apply_override(data, "output_dir=some/dir")
    apply_override(data, 'evaluation.epsilons=[0, 0.5]')
    cfg = RunConfig.model_validate(data)
    assert cfg.penalties[0].lam == 0.5 and cfg.train.lr == 0.2
    assert cfg.output_dir == "some/dir" and cfg.evaluation.epsilons == [0.0, 0.5]
    with pytest.raises(ConfigError):
        apply_override(data, "novalue")


def test_conflicting_projections_are_config_errors(tmp_path):
    cfg = dict(BLOBS, penalties=[{"kind": "sn_project", "tau0": 1.0}, {"kind": "sn_project", "tau0": 2.0}])
    assert _cli("train", "--config", _write(tmp_path, cfg), "--set", f"output_dir={tmp_path}/o") == 2


def test_train_writes_metrics_and_is_deterministic(tmp_path, monkeypatch):
    monkeypatch.setenv("KERNREG_THREADS", "0")
    path = _write(tmp_path, BLOBS)
    assert _cli("train", "-c", path, "--set", f"output_dir={tmp_path}/a") == 0
    assert _cli("train", "-c", path, "--set", f"output_dir={tmp_path}/b") == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    rows = _rows(tmp_path / "a" / "metrics.csv")
    assert len(rows) == 2
    assert {"epoch", "loss", "train_acc", "val_acc", "pen_weight_decay", "sigma_W1"} <= set(rows[0])
    assert (tmp_path / "a" / "model.ckpt").exists() and (tmp_path / "a" / "norms.csv").exists()


def test_eval_robust_matches_clean_accuracy(tmp_path):
    path = _write(tmp_path, BLOBS)
    out = tmp_path / "o"
    assert _cli("train", "-c", path, "--set", f"output_dir={out}") == 0
    assert _cli("eval-robust", "-c", path, "--set", f"output_dir={out}") == 0
    robust = _rows(out / "robust.csv")
    final = _rows(out / "metrics.csv")[-1]
    assert float(robust[0]["epsilon"]) == 0.0
    assert float(robust[0]["accuracy"]) == float(final["test_acc"])
    assert float(robust[1]["accuracy"]) <= float(robust[0]["accuracy"])


def test_norms_and_margins(tmp_path):
    path = _write(tmp_path, BLOBS)
    out = tmp_path / "o"
    assert _cli("train", "-c", path, "--set", f"output_dir={out}") == 0
    assert _cli("norms", "-c", path, "--set", f"output_dir={out}") == 0
    norms = {r["quantity"]: float(r["value"]) for r in _rows(out / "norms.csv")}
    assert norms["lower_class_0"] <= norms["upper"] + 1e-6
    assert _cli("margins", "-c", path, "--set", f"output_dir={out}") == 0
    margins = _rows(out / "margins.csv")
    cdf = [float(r["cdf"]) for r in margins]
    assert cdf == sorted(cdf) and cdf[-1] == 1.0
    summary = json.loads((out / "margin_bound.json").read_text())
    assert summary["c1"] == 1.0 and summary["certified"] is False


def test_grid_over_projection_radii(tmp_path):
    cfg = dict(BLOBS, train={**BLOBS["train"], "epochs": 1}, grid={"table": "image", "method": "sn_project"})
    out = tmp_path / "g"
    assert _cli("grid", "-c", _write(tmp_path, cfg), "--set", f"output_dir={out}") == 0
    rows = _rows(out / "grid.csv")
    assert [float(r["tau"]) for r in rows] == [0.5, 0.6, 0.8, 1.0, 1.2, 1.4]
    assert all((out / "grid" / f"{i:03d}" / "metrics.csv").exists() for i in range(6))


def test_grid_explicit_points(tmp_path):
    cfg = dict(BLOBS, train={**BLOBS["train"], "epochs": 1}, grid={"method": "grad_norm", "points": [{"gradnorm": 0.01, "lr": 0.1}]})
    out = tmp_path / "g"
    assert _cli("grid", "-c", _write(tmp_path, cfg), "--set", f"output_dir={out}") == 0
    assert len(_rows(out / "grid.csv")) == 1


def test_divergence_exit_code(tmp_path, capsys):
    cfg = dict(BLOBS, dataset={**BLOBS["dataset"], "options": {"separation": 1e200}}, train={**BLOBS["train"], "lr": 1e300})
    out = tmp_path / "d"
    assert _cli("train", "-c", _write(tmp_path, cfg), "--set", f"output_dir={out}") == 3
    assert str(out / "last_good.ckpt") in capsys.readouterr().err
    assert (out / "last_good.ckpt").exists()


def test_missing_checkpoint_and_file(tmp_path):
    path = _write(tmp_path, BLOBS)
    assert _cli("eval-robust", "-c", path, "--set", f"output_dir={tmp_path}/none") == 2
    assert _cli("train", "-c", tmp_path / "absent.json") == 2


def test_binary_loss_and_sequence_preset(tmp_path):
    hinge = dict(BLOBS, train={**BLOBS["train"], "loss": "hinge"})
    assert _cli("train", "-c", _write(tmp_path, hinge, "h.json"), "--set", f"output_dir={tmp_path}/h") == 0
    seq = {
        "dataset": {"name": "onehot-sequences", "n": 40, "options": {"length": 12}},
        "model": {"preset": "sequence", "options": {"channels": 4}},
        "train": {"optimizer": "adam", "lr": 0.01, "epochs": 1, "batch_size": 16, "loss": "logistic", "mutation_p": 0.1},
        "evaluation": {"norm_steps": 3},
    }
    assert _cli("train", "-c", _write(tmp_path, seq, "s.json"), "--set", f"output_dir={tmp_path}/s") == 0
