"""Scenario definitions, sweeps, baselines and the run-directory layout."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .classifier import Classifier, ClassifierConfig, accuracy, train_classifier
from .metrics import MetricsReport, dump_histograms, emit_report
from .reprogram import (
    ConfigError,
    ReprogramConfig,
    build_generator,
    generate_cleaned,
    save_discriminator,
    save_generator,
    train_reprogram,
)
from .synth import TASK_A, TASK_B, make_synth_pair
from .tabular import Dataset, Schema, SchemaError, align, load_csv, split
from .vae import VaeConfig, VaeModel, train_vae

log = logging.getLogger(__name__)

OUTPUT_ENV = "FAIRGAN_REPROGRAM_OUT"
KINDS = ("SDST", "SDDT", "DDST", "DDDT")
SYNTH_PREFIX = "synth:"


def output_root(out: str | Path | None = None) -> Path:
    """``out`` if given, else $FAIRGAN_REPROGRAM_OUT, else ./runs."""
    if out is not None:
        return Path(out)
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _hash(payload: Any) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


# ------------------------------------------------------------------ data refs


@dataclass(frozen=True)
class DataRef:
    """A dataset plus the column used as its task label.

    ``dataset`` is a CSV path (with ``schema`` pointing to its JSON
    descriptor) or ``synth:source`` / ``synth:target``.
    """

    dataset: str
    label: str
    schema: str | None = None

    @property
    def is_synthetic(self) -> bool:
        return self.dataset.startswith(SYNTH_PREFIX)

    def problems(self, prefix: str) -> list[str]:
        p = []
        if self.is_synthetic:
            if self.dataset not in ("synth:source", "synth:target"):
                p.append(f"{prefix}.dataset: unknown synthetic table {self.dataset!r}")
            if self.label not in (TASK_A, TASK_B):
                p.append(f"{prefix}.label: synthetic labels are {TASK_A!r} and {TASK_B!r}, got {self.label!r}")
        elif self.schema is None:
            p.append(f"{prefix}.schema: required for CSV datasets")
        return p


@dataclass(frozen=True)
class SynthOptions:
    n_rows: int = 20000
    bias: float = 0.0
    seed: int = 0


@lru_cache(maxsize=4)
def _synth_pair(opts: SynthOptions) -> tuple[Dataset, Dataset]:
    return make_synth_pair(opts.n_rows, opts.bias, opts.seed)


def load_ref(ref: DataRef, synth: SynthOptions = SynthOptions()) -> Dataset:
    """Load the referenced table with ``ref.label`` as its label column."""
    if ref.is_synthetic:
        source, target = _synth_pair(synth)
        data = source if ref.dataset == "synth:source" else target
    else:
        data = load_csv(ref.dataset, Schema.load(ref.schema))
    if ref.label not in data.schema.names:
        raise SchemaError(f"label column {ref.label!r} not in {ref.dataset}")
    return data.with_schema(data.schema.with_task(ref.label))


# ------------------------------------------------------------------ scenarios


_SYNTH_REFS = {
    "SDST": (DataRef("synth:source", TASK_A), DataRef("synth:source", TASK_A)),
    "SDDT": (DataRef("synth:source", TASK_A), DataRef("synth:source", TASK_B)),
    "DDST": (DataRef("synth:source", TASK_A), DataRef("synth:target", TASK_A)),
    "DDDT": (DataRef("synth:source", TASK_A), DataRef("synth:target", TASK_B)),
}


@dataclass(frozen=True)
class ScenarioSpec:
    """One transfer experiment.

    ``seed`` drives the data splits, the frozen source models, the baseline
    and the reprogramming run (it overrides ``config.seed``).
    """

    kind: str
    source: DataRef
    target: DataRef
    config: ReprogramConfig = field(default_factory=ReprogramConfig)
    seed: int = 0
    synth: SynthOptions = field(default_factory=SynthOptions)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)

    @classmethod
    def synthetic(cls, kind: str, config: ReprogramConfig | None = None, bias: float = 0.0,
                  n_rows: int = 20000, seed: int = 0, **kw) -> "ScenarioSpec":
        if kind not in _SYNTH_REFS:
            raise ConfigError([f"kind: must be one of {KINDS}, got {kind!r}"])
        src, tgt = _SYNTH_REFS[kind]
        return cls(kind, src, tgt, config or ReprogramConfig(), seed, SynthOptions(n_rows, bias, 0), **kw)

    @property
    def reprogram_config(self) -> ReprogramConfig:
        return replace(self.config, seed=self.seed)

    def problems(self) -> list[str]:
        p = []
        if self.kind not in KINDS:
            p.append(f"kind: must be one of {KINDS}, got {self.kind!r}")
        p += self.source.problems("source") + self.target.problems("target")
        same_data = self.source.dataset == self.target.dataset
        same_label = self.source.label == self.target.label
        want = {"SDST": (True, True), "SDDT": (True, False), "DDST": (False, True), "DDDT": (False, False)}
        if self.kind in want and (same_data, same_label) != want[self.kind]:
            d, t = want[self.kind]
            p.append(f"kind: {self.kind} needs {'the same' if d else 'a different'} dataset and "
                     f"{'the same' if t else 'a different'} label")
        if not (isinstance(self.seed, int) and self.seed >= 0):
            p.append(f"seed: must be a nonnegative integer, got {self.seed!r}")
        if not 0.0 <= self.synth.bias <= 1.0:
            p.append(f"synth.bias: must lie in [0, 1], got {self.synth.bias!r}")
        if not (isinstance(self.synth.n_rows, int) and self.synth.n_rows >= 20):
            p.append(f"synth.n_rows: must be an integer >= 20, got {self.synth.n_rows!r}")
        p += self.config.problems()
        return p

    def validate(self) -> "ScenarioSpec":
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "source": asdict(self.source),
            "target": asdict(self.target),
            "config": self.config.to_dict(),
            "seed": self.seed,
            "synth": asdict(self.synth),
            "classifier": {**asdict(self.classifier), "hidden": list(self.classifier.hidden)},
            "vae": {**asdict(self.vae), "hidden": list(self.vae.hidden)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        """Build and validate a spec; ``source``/``target`` default to the synthetic pair."""
        known = {"kind", "source", "target", "config", "seed", "synth", "classifier", "vae"}
        problems = [f"{k}: unknown field" for k in sorted(set(d) - known)]
        kind = d.get("kind")
        if kind is None:
            problems.append("kind: required")
        config = ReprogramConfig()
        try:
            config = ReprogramConfig.from_dict(d.get("config", {}))
        except ConfigError as e:
            problems += [f"config.{q}" for q in e.problems]
        except TypeError as e:
            problems.append(f"config: {e}")
        parts = {}
        for name, typ in (("synth", SynthOptions), ("classifier", ClassifierConfig), ("vae", VaeConfig)):
            try:
                kw = dict(d.get(name, {}))
                if "hidden" in kw:
                    kw["hidden"] = tuple(kw["hidden"])
                parts[name] = typ(**kw)
            except TypeError as e:
                problems.append(f"{name}: {e}")
        refs = {}
        for name in ("source", "target"):
            if name in d:
                try:
                    refs[name] = DataRef(**d[name])
                except TypeError as e:
                    problems.append(f"{name}: {e}")
            elif kind in _SYNTH_REFS:
                refs[name] = _SYNTH_REFS[kind][name == "target"]
            else:
                problems.append(f"{name}: required")
        if problems:
            raise ConfigError(problems)
        return cls(kind, refs["source"], refs["target"], config, d.get("seed", 0), parts["synth"],
                   parts["classifier"], parts["vae"]).validate()

    def config_hash(self) -> str:
        return _hash(self.to_dict())

    def artifact_key(self) -> dict:
        """Everything the frozen source models depend on."""
        d = self.to_dict()
        return {k: d[k] for k in ("source", "seed", "classifier", "vae")} | \
            ({"synth": d["synth"]} if self.source.is_synthetic else {})


def run_directory(spec: ScenarioSpec, out_root: str | Path | None = None) -> Path:
    c = spec.config
    return output_root(out_root) / f"{spec.kind}-{c.mode}-{spec.config_hash()}"


# ------------------------------------------------------------------ artifacts


@dataclass(frozen=True)
class Artifacts:
    classifier: Path
    vae: Path


@dataclass
class Splits:
    source: tuple[Dataset, Dataset, Dataset]
    target: tuple[Dataset, Dataset, Dataset]


def load_splits(spec: ScenarioSpec) -> Splits:
    source = load_ref(spec.source, spec.synth)
    target = load_ref(spec.target, spec.synth)
    # one split seed for both tables, so SDST test rows are unseen by every model
    return Splits(split(source, seed=spec.seed), split(target, seed=spec.seed))


def prepare_artifacts(spec: ScenarioSpec, out_root: str | Path | None = None,
                      splits: Splits | None = None) -> Artifacts:
    """Train (or reuse) the frozen source classifier and VAE for ``spec``."""
    key = spec.artifact_key()
    d = output_root(out_root) / "artifacts" / _hash(key)
    arts = Artifacts(d / "classifier.json", d / "vae.json")
    if arts.classifier.exists() and arts.vae.exists():
        return arts
    splits = splits or load_splits(spec)
    tr, va, _ = splits.source
    d.mkdir(parents=True, exist_ok=True)
    log.info("training source classifier and VAE into %s", d)
    train_classifier(tr, va, spec.classifier, seed=spec.seed).save(arts.classifier)
    model, report = train_vae(tr, va, spec.vae, seed=spec.seed)
    model.save(arts.vae)
    write_elbo_csv(model, d / "elbo.csv")
    (d / "key.json").write_text(json.dumps(key, sort_keys=True, indent=2) + "\n")
    return arts


def write_elbo_csv(model: VaeModel, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_elbo", "val_elbo"])
        for row in model.history:
            w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])


def load_artifacts(arts: Artifacts, source_schema: Schema) -> tuple[Classifier, VaeModel]:
    for p in (arts.classifier, arts.vae):
        if not Path(p).exists():
            raise FileNotFoundError(f"missing artifact {p}")
    clf = Classifier.load(arts.classifier)
    vae = VaeModel.load(arts.vae)
    if clf.schema.feature_columns != source_schema.feature_columns:
        raise SchemaError("classifier artifact does not match the source schema")
    if vae.schema.feature_columns != source_schema.feature_columns or \
            vae.schema.protected_column != source_schema.protected_column:
        raise SchemaError("VAE artifact does not match the source schema")
    return clf, vae


# ------------------------------------------------------------------ scenarios


def run_scenario(spec: ScenarioSpec, artifacts: Artifacts | None = None,
                 out_root: str | Path | None = None, write: bool = True) -> MetricsReport:
    """align -> build_generator -> train_reprogram -> metrics, written under `run_directory`."""
    spec.validate()
    splits = load_splits(spec)
    if artifacts is None:
        artifacts = prepare_artifacts(spec, out_root, splits)
    clf, vae = load_artifacts(artifacts, splits.source[0].schema)
    ttr, tva, tte = splits.target
    baseline = train_classifier(ttr, tva, spec.classifier, seed=spec.seed)
    base_acc = accuracy(baseline, tte)

    config = spec.reprogram_config
    g = build_generator(vae, ttr.schema, align(vae.schema, ttr.schema), seed=spec.seed, hidden=config.enc_hidden)
    result = train_reprogram(g, clf, ttr, tva, config, test=tte, scenario=spec.kind, baseline_accuracy=base_acc)
    report = result.report
    if write:
        d = run_directory(spec, out_root)
        d.mkdir(parents=True, exist_ok=True)
        (d / "spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n")
        emit_report([report], d)
        save_generator(result.generator, d / "generator.json")
        baseline.save(d / "baseline.json")
        if result.d1 is not None:
            save_discriminator(result.d1, d / "d1.json")
        if result.d2 is not None:
            save_discriminator(result.d2, d / "d2.json")
        with open(d / "history.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "val_accuracy", "max_tv", "realism_pass", "fairness", "total", "d1", "d2"])
            for h in result.history:
                w.writerow([h.epoch, f"{h.val_accuracy:.6f}", "" if h.max_tv is None else f"{h.max_tv:.6f}",
                            h.realism_pass, "" if h.fairness is None else f"{h.fairness:.6f}",
                            f"{h.terms['total']:.6f}", f"{h.terms['d1']:.6f}", f"{h.terms['d2']:.6f}"])
        dump_histograms(tte, generate_cleaned(result.generator, tte, clf), result.generator.shared_columns,
                        d / "histograms.csv")
    return report


# --------------------------------------------------------------------- sweeps


def _positive_finite(values) -> bool:
    return all(isinstance(v, (int, float)) and np.isfinite(v) and v > 0 for v in values)


@dataclass(frozen=True)
class SweepSpec:
    """Grid over gamma, delta and learning rate, replicated over seeds.

    An empty ``modes`` keeps the scenario's mode; ``lrs`` empty keeps its lr.
    """

    gammas: tuple[float, ...] = (0.5,)
    deltas: tuple[float, ...] = (0.0,)
    lrs: tuple[float, ...] = ()
    seeds: tuple[int, ...] = (0,)
    modes: tuple[str, ...] = ()

    def problems(self) -> list[str]:
        p = []
        if not self.gammas:
            p.append("gammas: grid must be nonempty")
        elif not _positive_finite(self.gammas):
            p.append(f"gammas: values must be finite and positive, got {list(self.gammas)}")
        if not self.deltas:
            p.append("deltas: grid must be nonempty")
        elif not all(isinstance(v, (int, float)) and np.isfinite(v) and v >= 0 for v in self.deltas):
            p.append(f"deltas: values must be finite and nonnegative, got {list(self.deltas)}")
        if not _positive_finite(self.lrs):
            p.append(f"lrs: values must be finite and positive, got {list(self.lrs)}")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            p.append(f"seeds: need one or more nonnegative integers, got {list(self.seeds)}")
        bad = [m for m in self.modes if m not in ("CLASSIFY_ONLY", "GAN", "FAIRGAN")]
        if bad:
            p.append(f"modes: unknown {bad}")
        return p

    def validate(self) -> "SweepSpec":
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        known = {"gammas", "deltas", "lrs", "seeds", "modes"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        return cls(**{k: tuple(v) for k, v in d.items()}).validate()

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    def points(self, scenario: ScenarioSpec) -> list[ScenarioSpec]:
        """Distinct scenario specs, one per grid point and seed, in canonical order."""
        base = scenario.config
        modes = sorted(set(self.modes)) or [base.mode]
        lrs = sorted(set(self.lrs)) or [base.lr]
        out = {}
        for mode, gamma, delta, lr, seed in itertools.product(
                modes, sorted(set(self.gammas)), sorted(set(self.deltas)), lrs, sorted(set(self.seeds))):
            if mode != "FAIRGAN":
                delta = 0.0  # only FAIRGAN uses delta
            cfg = replace(base, mode=mode, gamma=float(gamma), delta=float(delta), lr=float(lr))
            spec = replace(scenario, config=cfg, seed=seed)
            out[spec.config_hash()] = spec
        return list(out.values())


@dataclass
class SweepResult:
    reports: list[MetricsReport]
    failures: list[dict]
    best: MetricsReport | None

    def summary(self) -> dict:
        return {
            "runs": len(self.reports),
            "failures": self.failures,
            "best": None if self.best is None else self.best.to_dict(),
        }


def best_report(reports: Sequence[MetricsReport], accuracy_floor: float = 0.12) -> MetricsReport | None:
    """Best grid point under the checkpoint selection rule.

    Realism-constrained modes only consider runs that pass the realism check
    and stay within ``accuracy_floor`` of the baseline; FAIRGAN then prefers
    the fairness probe closest to 0.5, the others the highest accuracy.
    """
    if not reports:
        return None

    def ok(r: MetricsReport) -> bool:
        if r.mode == "CLASSIFY_ONLY":
            return True
        near = r.baseline_accuracy is None or r.accuracy >= r.baseline_accuracy - accuracy_floor
        return bool(r.realism_pass) and near

    fair = [r for r in reports if r.mode == "FAIRGAN" and ok(r) and r.fairness_probe is not None]
    if fair:
        return min(fair, key=lambda r: (abs(r.fairness_probe - 0.5), -r.accuracy))
    good = [r for r in reports if ok(r)]
    if good:
        return max(good, key=lambda r: r.accuracy)
    return None


def run_sweep(sweep: SweepSpec, scenario: ScenarioSpec, out_root: str | Path | None = None,
              artifacts: Artifacts | None = None) -> SweepResult:
    """One run per grid point and seed; failed points are recorded, not raised."""
    sweep.validate()
    scenario.validate()
    reports, failures = [], []
    for spec in sweep.points(scenario):
        try:
            reports.append(run_scenario(spec, artifacts, out_root))
        except Exception as e:  # noqa: BLE001 - a failed grid point must not stop the sweep
            log.warning("grid point %s failed: %s", spec.config_hash(), e)
            failures.append({"config": spec.to_dict()["config"], "seed": spec.seed,
                             "error": f"{type(e).__name__}: {e}"})
    key = lambda r: (r.scenario, r.mode, r.gamma, r.delta, r.lr, r.seed)  # noqa: E731
    reports.sort(key=key)
    return SweepResult(reports, failures, best_report(reports, scenario.config.accuracy_floor))


# ------------------------------------------------------------------ baselines


@dataclass
class BaselineRow:
    dataset: str
    label: str
    accuracy: float
    per_seed: list[float]
    majority: float


@dataclass
class BaselineTable:
    rows: list[BaselineRow]

    def format(self) -> str:
        lines = [f"{'dataset':<16}{'label':<16}{'accuracy':>10}{'majority':>10}"]
        for r in self.rows:
            lines.append(f"{r.dataset:<16}{r.label:<16}{100 * r.accuracy:>10.1f}{100 * r.majority:>10.1f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows]}


def make_baselines(tasks: Sequence[tuple[str, Dataset, str]], seeds: Sequence[int] = (0,),
                   config: ClassifierConfig | None = None, out_dir: str | Path | None = None) -> BaselineTable:
    """Train one classifier per (name, dataset, label) and seed; report the mean test accuracy.

    Classifiers are written frozen to ``out_dir`` when given.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    rows = []
    for name, data, label in tasks:
        data = data.with_schema(data.schema.with_task(label))
        accs = []
        for seed in seeds:
            tr, va, te = split(data, seed=seed)
            clf = train_classifier(tr, va, config, seed=seed)
            accs.append(accuracy(clf, te))
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                clf.save(Path(out_dir) / f"{name}-{label}-seed{seed}.json")
        counts = np.bincount(data.labels, minlength=2)
        rows.append(BaselineRow(name, label, float(np.mean(accs)), accs, float(counts.max() / counts.sum())))
    table = BaselineTable(rows)
    if out_dir is not None:
        (Path(out_dir) / "baselines.txt").write_text(table.format())
        (Path(out_dir) / "baselines.json").write_text(json.dumps(table.to_dict(), sort_keys=True, indent=2) + "\n")
    return table


def synth_baseline_tasks(synth: SynthOptions = SynthOptions()) -> list[tuple[str, Dataset, str]]:
    source, target = _synth_pair(synth)
    return [("source", source, TASK_A), ("source", source, TASK_B),
            ("target", target, TASK_A), ("target", target, TASK_B)]
