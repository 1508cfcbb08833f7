"""Histogram realism checks, fairness probes and report emission."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tabular import AlignmentMap, Dataset, SchemaError

DEFAULT_BINS = 20
DEFAULT_TV_THRESHOLD = 0.15
REPORT_FORMAT = "fairgan-reprogram/report/1"
SCENARIO_ORDER = ("SDST", "SDDT", "DDST", "DDDT")


@dataclass(frozen=True)
class ColumnHistogram:
    column: str
    edges: tuple  # numeric: bin edges over [0, 1]; categorical: category labels
    freqs: np.ndarray

    @property
    def binning(self) -> tuple:
        return self.edges


def histogram(data: Dataset, column: str, bins: int = DEFAULT_BINS) -> ColumnHistogram:
    if len(data) == 0:
        raise ValueError("empty data")
    spec = data.schema.column(column)
    values = data[column]
    if spec.is_categorical:
        counts = np.bincount(values, minlength=spec.cardinality).astype(np.float64)
        edges = spec.categories
    else:
        scaled = np.clip((values - spec.min) / (spec.max - spec.min), 0.0, 1.0)
        idx = np.minimum((scaled * bins).astype(np.int64), bins - 1)
        counts = np.bincount(idx, minlength=bins).astype(np.float64)
        edges = tuple(np.linspace(0.0, 1.0, bins + 1).tolist())
    return ColumnHistogram(column, tuple(edges), counts / counts.sum())


def tv_distance(h1: ColumnHistogram, h2: ColumnHistogram) -> float:
    if h1.binning != h2.binning:
        raise ValueError(f"histograms of {h1.column!r} and {h2.column!r} use different binnings")
    return float(0.5 * np.abs(h1.freqs - h2.freqs).sum())


@dataclass
class RealismResult:
    column_tv: dict[str, float]
    threshold: float
    passed: bool
    flagged: list[str] = field(default_factory=list)


def realism_columns_between(real: Dataset, generated: Dataset) -> list[str]:
    gen = {c.name for c in generated.schema.feature_columns}
    return [c.name for c in real.schema.feature_columns if c.name in gen]


def realism_check(
    real: Dataset,
    generated: Dataset,
    columns: Sequence[str] | AlignmentMap | None = None,
    threshold: float = DEFAULT_TV_THRESHOLD,
    bins: int = DEFAULT_BINS,
) -> RealismResult:
    """Per-column TV distance between real and generated histograms.

    Passes iff every compared column has TV <= ``threshold``. With an
    `AlignmentMap` the shared columns that are features on both sides are used.
    """
    feats = realism_columns_between(real, generated)
    if columns is None:
        names = feats
    elif isinstance(columns, AlignmentMap):
        names = [n for n in feats if n in columns.shared]
    else:
        names = list(columns)
    if not names:
        raise SchemaError("no shared columns to compare")
    tv = {}
    for name in names:
        if real.schema.column(name) != generated.schema.column(name):
            raise SchemaError(f"column {name!r} differs between real and generated data")
        tv[name] = tv_distance(histogram(real, name, bins), histogram(generated, name, bins))
    flagged = [n for n, d in tv.items() if d > threshold]
    return RealismResult(tv, threshold, not flagged, flagged)


def reconstruction_tv(real: Dataset, reconstructed: Dataset, bins: int = DEFAULT_BINS) -> dict[str, float]:
    """TV per modelled column (features and the protected attribute)."""
    names = [c.name for c in real.schema.feature_columns] + [real.schema.protected_column]
    return {n: tv_distance(histogram(real, n, bins), histogram(reconstructed, n, bins)) for n in names}


def probe_fairness(features: np.ndarray, protected: np.ndarray, seed: int = 0, config=None) -> float:
    """Held-out accuracy of a freshly trained classifier predicting the protected bit.

    Rows are split 60/20/20 into fit, early-stopping and held-out parts.
    """
    from .classifier import ClassifierConfig, fit_binary, hard_labels
    from . import diffnet

    s = np.asarray(protected, dtype=np.int64)
    if len(np.unique(s)) < 2:
        raise ValueError("protected attribute has a single class; fairness probe is undefined")
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    perm = np.random.default_rng(seed).permutation(n)
    a, b = int(0.6 * n), int(0.8 * n)
    fit_idx, stop_idx, test_idx = perm[:a], perm[a:b], perm[b:]
    if min(len(fit_idx), len(stop_idx), len(test_idx)) == 0:
        raise ValueError("too few rows for a fairness probe")
    net, fit = fit_binary(x[fit_idx], s[fit_idx], x[stop_idx], s[stop_idx],
                          config or ClassifierConfig(), seed + 1)
    pred = hard_labels(diffnet.predict(net, fit.params, x[test_idx]))
    return float((pred == s[test_idx]).mean())


# -------------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    scenario: str
    mode: str
    gamma: float
    delta: float
    lr: float
    seed: int
    accuracy: float
    baseline_accuracy: float | None = None
    column_tv: dict[str, float] = field(default_factory=dict)
    tv_threshold: float = DEFAULT_TV_THRESHOLD
    realism_pass: bool | None = None
    fairness_probe: float | None = None
    d2_accuracy: float | None = None
    details: dict = field(default_factory=dict)
    wall_clock: float | None = None

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        return d

    def to_json(self, include_timing: bool = False) -> str:
        d = {"format": REPORT_FORMAT, **self.to_dict(include_timing)}
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = {k: v for k, v in d.items() if k != "format"}
        return cls(**d)


def row_label(r: MetricsReport) -> str:
    if r.mode == "CLASSIFY_ONLY":
        return "Reprogramming"
    if r.mode == "GAN":
        return f"GAN gamma={r.gamma:g}"
    return f"FairGAN gamma={r.gamma:g} delta={r.delta:g}"


def _cell(group: list[MetricsReport]) -> str:
    acc = 100.0 * float(np.mean([r.accuracy for r in group]))
    text = f"{acc:.1f}"
    if group[0].mode != "CLASSIFY_ONLY":
        text += " ✓" if all(r.realism_pass for r in group) else " ×"
    probes = [r.fairness_probe for r in group if r.fairness_probe is not None]
    if group[0].mode == "FAIRGAN" and probes:
        text += f" p={100.0 * float(np.mean(probes)):.1f}"
    return text


def format_grid(reports: Sequence[MetricsReport]) -> str:
    """Plaintext grid: rows are modes / loss weights, columns are scenarios.

    Repeated seeds in the same cell are averaged.
    """
    if not reports:
        raise ValueError("no reports")
    scenarios = [s for s in SCENARIO_ORDER if any(r.scenario == s for r in reports)]
    scenarios += sorted({r.scenario for r in reports} - set(SCENARIO_ORDER))
    rows: dict[str, dict[str, list[MetricsReport]]] = {}
    for r in sorted(reports, key=lambda r: ({"CLASSIFY_ONLY": 0, "GAN": 1}.get(r.mode, 2), r.gamma, r.delta)):
        rows.setdefault(row_label(r), {}).setdefault(r.scenario, []).append(r)
    table = [[""] + scenarios]
    for label, cells in rows.items():
        table.append([label] + [_cell(cells[s]) if s in cells else "-" for s in scenarios])
    base = []
    for s in scenarios:
        vals = [r.baseline_accuracy for r in reports if r.scenario == s and r.baseline_accuracy is not None]
        base.append(f"{100.0 * float(np.mean(vals)):.1f}" if vals else "-")
    table.append(["Baseline"] + base)
    widths = [max(len(row[j]) for row in table) for j in range(len(table[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    return "\n".join(lines) + "\n"


def emit_report(reports: Sequence[MetricsReport], out_dir: str | Path, stem: str = "report",
                formats: Sequence[str] = ("json", "txt")) -> list[Path]:
    """Write the reports as JSON and/or a plaintext grid; returns the written paths."""
    if not reports:
        raise ValueError("no reports to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = out / f"{stem}.json"
        payload = {"format": REPORT_FORMAT, "reports": [r.to_dict() for r in reports]}
        p.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        written.append(p)
    if "txt" in formats:
        p = out / f"{stem}.txt"
        p.write_text(format_grid(reports), encoding="utf-8")
        written.append(p)
    return written


def load_reports(path: str | Path) -> list[MetricsReport]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if d.get("format") != REPORT_FORMAT:
        raise ValueError(f"unsupported report format {d.get('format')!r}")
    if "reports" in d:
        return [MetricsReport.from_dict(r) for r in d["reports"]]
    return [MetricsReport.from_dict(d)]


def dump_histograms(real: Dataset, generated: Dataset, columns: Sequence[str], path: str | Path,
                    bins: int = DEFAULT_BINS) -> None:
    """CSV with one row per (column, bin): real and generated frequencies."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["column", "bin", "real", "generated"])
        for name in columns:
            hr, hg = histogram(real, name, bins), histogram(generated, name, bins)
            spec = real.schema.column(name)
            labels = hr.edges if spec.is_categorical else [f"{hr.edges[i]:.2f}-{hr.edges[i + 1]:.2f}" for i in range(bins)]
            for label, p, q in zip(labels, hr.freqs, hg.freqs):
                w.writerow([name, label, f"{p:.6f}", f"{q:.6f}"])
