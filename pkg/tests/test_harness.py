import csv
import json

import numpy as np
import pytest

from trustprop import cli
from trustprop import harness as hx
from trustprop import miner_network as mn
from trustprop import solvers as sv

FAST = ["population.V=20", "population.malicious_count=4", "ga.generations=30",
        'solvers=["greedy","two_opt","ga","held_karp"]']


def test_config_overrides_and_validation(tmp_path):
    cfg = hx.load_config(overrides=["population.V=40", "lam=0.6", "gnn.width=16", 'solvers=["greedy"]'])
    assert cfg.population.V == 40 and cfg.lam == 0.6 and cfg.gnn.width == 16 and cfg.solvers == ("greedy",)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(hx.config_to_dict(cfg)))
    assert hx.load_config(path, seed=5) == hx.load_config(overrides=[
        "population.V=40", "lam=0.6", "gnn.width=16", 'solvers=["greedy"]', "seed=5"])
    for bad in (["population.nope=1"], ["solvers=[\"magic\"]"], ["population.V=3"], ["noequals"],
                ["checkpoint=/no/such/file"], ["lam.x=1"]):
        with pytest.raises((ValueError, FileNotFoundError)):
            hx.load_config(overrides=bad)


def test_gen_dataset_labels_beat_greedy():
    data = hx.gen_dataset(10, 10, seed=1, labeler="held_karp")
    for inst in data:
        D = sv.distance_matrix(inst.coords)
        assert sv.tour_length(inst.label, D) <= sv.tour_length(inst.degraded, D) + 1e-12
    with pytest.raises(ValueError):
        hx.gen_dataset(1, 19, 0, labeler="held_karp")


def test_dataset_files_byte_identical(tmp_path):
    for name in ("a.json", "b.json"):
        hx.save_dataset(tmp_path / name, hx.gen_dataset(4, 9, seed=2))
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    loaded = hx.load_dataset(tmp_path / "a.json")
    assert loaded[0].label == hx.gen_dataset(4, 9, seed=2)[0].label


def test_greedy_suboptimal_on_average():
    data = hx.gen_dataset(40, 12, seed=3, labeler="held_karp")
    ratios = [sv.tour_length(i.degraded, sv.distance_matrix(i.coords)) /
              sv.tour_length(i.label, sv.distance_matrix(i.coords)) for i in data]
    assert np.mean(ratios) > 1.0


def test_run_experiment_contract():
    cfg = hx.load_config(overrides=FAST)
    report = hx.run_experiment(cfg)
    hx.verify_report(report)
    assert report["K"] == 16
    s = report["solvers"]
    assert s["two_opt"]["cost_s"] <= s["greedy"]["cost_s"] + 1e-12
    assert s["held_karp"]["cost_s"] <= min(v["cost_s"] for v in s.values()) + 1e-9
    assert report["mean_trust_selected"] >= report["mean_trust_all"]
    assert hx.strip_timing(report) == hx.strip_timing(hx.run_experiment(cfg))


def test_run_experiment_paper_population():
    report = hx.run_experiment(hx.load_config(overrides=['solvers=["greedy"]']))
    assert report["V"] == 118 and report["K"] == 99
    assert all(r["ts_normalized"] > 0.5 for r in report["trust"] if r["selected"])


def test_resfusion_requires_checkpoint():
    cfg = hx.load_config(overrides=FAST[:2] + ['solvers=["resfusion"]'])
    with pytest.raises(FileNotFoundError):
        hx.run_experiment(cfg)


def test_resfusion_in_pipeline_with_small_model(tmp_path):
    over = ["population.V=12", "population.malicious_count=2", "gnn.layers=1", "gnn.width=8",
            "schedule.T=30", "sample_count=3", "train.steps=3", "train.instances=4", "train.V=6",
            "train.batch_size=2", 'solvers=["greedy","resfusion","resfusion_no_prior"]']
    cfg = hx.load_config(overrides=over)
    params, result = hx.train_model(cfg)
    assert len(result.losses) == 3
    hx.save_model(tmp_path / "m.ckpt", params, cfg)
    cfg = hx.load_config(overrides=over + [f"checkpoint={tmp_path / 'm.ckpt'}"])
    report = hx.run_experiment(cfg)
    hx.verify_report(report)
    assert set(report["failure_rate"]) == {"resfusion", "resfusion_no_prior"}
    assert report["solvers"]["resfusion"]["denoiser_calls"] == cfg.schedule.build().t_prime
    assert report["solvers"]["resfusion_no_prior"]["denoiser_calls"] == 30


def test_trajectory_source(tmp_path):
    path = tmp_path / "traj.csv"
    mn.write_trajectories(path, mn.synth_trajectories(14, 9, 3, 800, seed=1))
    cfg = hx.load_config(overrides=["population.source=trajectory", f"population.trajectory_csv={path}",
                                    "population.timestamp=6", "population.malicious_count=3",
                                    'solvers=["greedy"]'])
    report = hx.run_experiment(cfg)
    assert report["V"] == 14 and report["K"] == 11


def test_emit_metrics(tmp_path):
    cfg = hx.load_config(overrides=FAST)
    reports = [hx.run_experiment(cfg), hx.run_experiment(hx.apply_overrides(cfg, ["population.V=22"]))]
    paths = hx.emit_metrics(reports, tmp_path / "a")
    hx.emit_metrics(reports, tmp_path / "b")
    for p in paths:
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
    with open(paths[1]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * len(cfg.solvers)
    single = hx.emit_metrics(reports[0], tmp_path / "c")
    assert json.loads(single[0].read_text()) == json.loads(json.dumps(reports[0]))


def test_verify_report_catches_bad_tour():
    report = hx.run_experiment(hx.load_config(overrides=FAST))
    report["solvers"]["greedy"]["tour"] = report["solvers"]["greedy"]["tour"][:-1]
    with pytest.raises(AssertionError):
        hx.verify_report(report)


def test_cli_commands(tmp_path, capsys):
    out = tmp_path / "run"
    base = ["--out", str(out), "--seed", "3"]
    assert cli.main(["solve", *base, *sum((["--set", s] for s in FAST), [])]) == 0
    assert (out / "report.json").exists() and (out / "costs.csv").exists()
    assert cli.main(["trust-report", *base, "--set", "population.V=20", "--set", "population.malicious_count=3"]) == 0
    assert len(json.loads((out / "trust.json").read_text())) == 20
    assert cli.main(["gen-data", *base, "--set", "train.instances=2", "--set", "train.V=7"]) == 0
    assert len(hx.load_dataset(out / "dataset.json")) == 2
    assert cli.main(["train", *base, "--set", f"train.dataset={out / 'dataset.json'}", "--set", "train.steps=2",
                     "--set", "gnn.layers=1", "--set", "gnn.width=8", "--set", "train.batch_size=2"]) == 0
    assert (out / "model.ckpt").exists()
    assert cli.main(["simulate", *base, "--sizes", "20", "24", "--set", "population.malicious_count=4",
                     "--set", 'solvers=["greedy","two_opt"]']) == 0
    with open(out / "costs.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4
    assert cli.main(["solve", "--out", str(out), "--set", "bogus=1"]) == 2
    assert "config error" in capsys.readouterr().err
