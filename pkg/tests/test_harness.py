import json

import numpy as np
import pytest

from fairgan_reprogram.classifier import ClassifierConfig
from fairgan_reprogram.harness import (
    DataRef,
    ScenarioSpec,
    SweepSpec,
    SynthOptions,
    best_report,
    make_baselines,
    output_root,
    prepare_artifacts,
    run_directory,
    run_scenario,
    run_sweep,
    synth_baseline_tasks,
)
from fairgan_reprogram.metrics import MetricsReport, load_reports
from fairgan_reprogram.reprogram import ConfigError, ReprogramConfig
from fairgan_reprogram.synth import TASK_A, TASK_B
from fairgan_reprogram.vae import VaeConfig

TINY = dict(
    classifier=ClassifierConfig(hidden=(8,), max_epochs=4),
    vae=VaeConfig(hidden=(8,), latent_dim=4, epochs=2),
)


def tiny(kind="SDST", mode="GAN", **kw):
    cfg = ReprogramConfig(mode=mode, epochs=2, enc_hidden=(8,), disc_hidden=(8,), d_steps=1, **kw)
    return ScenarioSpec.synthetic(kind, cfg, bias=0.5, n_rows=400, **TINY)


def test_output_root_precedence(monkeypatch, tmp_path):
    monkeypatch.delenv("FAIRGAN_REPROGRAM_OUT", raising=False)
    assert str(output_root()) == "runs"
    monkeypatch.setenv("FAIRGAN_REPROGRAM_OUT", str(tmp_path))
    assert output_root() == tmp_path
    assert output_root("x") == output_root("x").__class__("x")


@pytest.mark.parametrize("kind,src,tgt", [
    ("SDST", ("synth:source", TASK_A), ("synth:source", TASK_B)),
    ("SDDT", ("synth:source", TASK_A), ("synth:source", TASK_A)),
    ("DDST", ("synth:source", TASK_A), ("synth:source", TASK_A)),
    ("DDDT", ("synth:source", TASK_A), ("synth:target", TASK_A)),
])
def test_kind_invariants(kind, src, tgt):
    spec = ScenarioSpec(kind, DataRef(*src), DataRef(*tgt))
    with pytest.raises(ConfigError, match="kind"):
        spec.validate()


@pytest.mark.parametrize("kind", ["SDST", "SDDT", "DDST", "DDDT"])
def test_synthetic_specs_are_valid(kind):
    ScenarioSpec.synthetic(kind).validate()


def test_from_dict_collects_every_problem():
    with pytest.raises(ConfigError) as e:
        ScenarioSpec.from_dict({"kind": "SDST", "config": {"gamma": -1, "mode": "X"}, "colour": 1, "seed": -2})
    text = " ".join(e.value.problems)
    assert "config.gamma" in text and "config.mode" in text and "colour" in text
    with pytest.raises(ConfigError, match="seed"):
        ScenarioSpec.from_dict({"kind": "SDST", "seed": -2})


def test_spec_dict_roundtrip_and_hash():
    spec = tiny("DDDT", "FAIRGAN", delta=1.0)
    back = ScenarioSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert back == spec and back.config_hash() == spec.config_hash()
    assert tiny(gamma=1.0).config_hash() != tiny(gamma=0.5).config_hash()


def test_run_directory_layout(tmp_path):
    spec = tiny()
    assert run_directory(spec, tmp_path).name == f"SDST-GAN-{spec.config_hash()}"


def test_sweep_points_are_order_insensitive_and_deduplicated():
    spec = tiny()
    a = SweepSpec(gammas=(1.0, 0.5), deltas=(0.0, 2.0), seeds=(1, 0)).points(spec)
    b = SweepSpec(gammas=(0.5, 1.0, 0.5), deltas=(2.0, 0.0), seeds=(0, 1)).points(spec)
    assert [p.config_hash() for p in a] == [p.config_hash() for p in b]
    # delta only matters for FAIRGAN, so GAN collapses the delta axis
    assert len(a) == 4 and all(p.config.delta == 0.0 for p in a)
    fair = SweepSpec(gammas=(0.5,), deltas=(0.0, 2.0), modes=("FAIRGAN",)).points(spec)
    assert sorted(p.config.delta for p in fair) == [0.0, 2.0]


def test_sweep_validation_names_fields():
    with pytest.raises(ConfigError) as e:
        SweepSpec.from_dict({"gammas": [], "deltas": [-1], "seeds": [], "bogus": 1})
    assert "bogus" in str(e.value)
    with pytest.raises(ConfigError) as e:
        SweepSpec.from_dict({"gammas": [0], "deltas": [-1], "seeds": []})
    text = str(e.value)
    assert "gammas" in text and "deltas" in text and "seeds" in text


def test_artifacts_are_cached(tmp_path):
    spec = tiny()
    arts = prepare_artifacts(spec, tmp_path)
    stamp = arts.vae.stat().st_mtime_ns
    assert (arts.vae.parent / "elbo.csv").exists()
    # a different reprogramming config reuses the same frozen models
    again = prepare_artifacts(tiny(gamma=2.0), tmp_path)
    assert again == arts and arts.vae.stat().st_mtime_ns == stamp


def test_run_scenario_writes_outputs_and_is_reproducible(tmp_path):
    spec = tiny("DDDT", "FAIRGAN", delta=1.0)
    r1 = run_scenario(spec, out_root=tmp_path / "a")
    r2 = run_scenario(spec, out_root=tmp_path / "b")
    d1, d2 = run_directory(spec, tmp_path / "a"), run_directory(spec, tmp_path / "b")
    for name in ("spec.json", "report.json", "report.txt", "generator.json", "baseline.json",
                 "d1.json", "d2.json", "history.csv", "histograms.csv"):
        assert (d1 / name).exists(), name
    assert (d1 / "report.json").read_bytes() == (d2 / "report.json").read_bytes()
    assert load_reports(d1 / "report.json")[0].accuracy == r1.accuracy == r2.accuracy
    assert r1.scenario == "DDDT" and r1.baseline_accuracy is not None


def test_single_point_sweep_equals_run_scenario(tmp_path):
    spec = tiny()
    direct = run_scenario(spec, out_root=tmp_path / "direct")
    res = run_sweep(SweepSpec(gammas=(spec.config.gamma,), deltas=(0.0,), seeds=(spec.seed,)), spec,
                    out_root=tmp_path / "sweep")
    assert not res.failures and len(res.reports) == 1
    assert res.reports[0].to_json() == direct.to_json()


def test_sweep_records_failures(tmp_path, monkeypatch):
    import fairgan_reprogram.harness as h

    def boom(spec, artifacts=None, out_root=None):
        if spec.config.gamma > 1:
            raise FloatingPointError("diverged")
        return MetricsReport(scenario=spec.kind, mode=spec.config.mode, gamma=spec.config.gamma, delta=0.0,
                             lr=spec.config.lr, seed=spec.seed, accuracy=0.8, realism_pass=True)
    monkeypatch.setattr(h, "run_scenario", boom)
    res = run_sweep(SweepSpec(gammas=(2.0, 0.5)), tiny(), out_root=tmp_path)
    assert len(res.reports) == 1 and len(res.failures) == 1
    assert "diverged" in res.failures[0]["error"]


def _rep(**kw):
    base = dict(scenario="SDST", mode="GAN", gamma=0.5, delta=0.0, lr=1e-3, seed=0, accuracy=0.8,
                baseline_accuracy=0.85, realism_pass=True)
    base.update(kw)
    return MetricsReport(**base)


def test_best_report_rule():
    assert best_report([]) is None
    reps = [_rep(accuracy=0.9, realism_pass=False), _rep(accuracy=0.8), _rep(accuracy=0.6)]
    assert best_report(reps).accuracy == 0.8
    fair = [_rep(mode="FAIRGAN", fairness_probe=0.7, accuracy=0.84),
            _rep(mode="FAIRGAN", fairness_probe=0.52, accuracy=0.78),
            _rep(mode="FAIRGAN", fairness_probe=0.5, accuracy=0.6)]
    assert best_report(fair).fairness_probe == 0.52


def test_baselines_beat_majority_share(tmp_path):
    tasks = synth_baseline_tasks(SynthOptions(n_rows=1500, bias=0.0, seed=0))
    table = make_baselines(tasks, seeds=(0,), config=ClassifierConfig(hidden=(16,), max_epochs=20), out_dir=tmp_path)
    assert len(table.rows) == 4
    for row in table.rows:
        assert row.accuracy >= row.majority, row
    assert (tmp_path / "baselines.txt").exists() and (tmp_path / "baselines.json").exists()


def test_two_gamma_grid_gives_two_reports(tmp_path):
    res = run_sweep(SweepSpec(gammas=(0.5, 100.0)), tiny(), out_root=tmp_path)
    assert not res.failures
    assert [r.gamma for r in res.reports] == [0.5, 100.0]


def test_baselines_rerun_is_identical(tmp_path):
    tasks = synth_baseline_tasks(SynthOptions(n_rows=600, bias=0.3, seed=1))[:2]
    cfg = ClassifierConfig(hidden=(8,), max_epochs=5)
    a = make_baselines(tasks, seeds=(0, 1), config=cfg, out_dir=tmp_path / "a")
    b = make_baselines(tasks, seeds=(0, 1), config=cfg, out_dir=tmp_path / "b")
    assert a == b
    assert (tmp_path / "a" / "baselines.json").read_bytes() == (tmp_path / "b" / "baselines.json").read_bytes()
