"""Synthetic stand-ins for the COMPAS / Candidate tables.

Rows are driven by four standard-normal factors plus a protected bit ``s``.
Two factors are shifted by ``bias * (2s - 1)``; every feature built on them,
and both outcome labels, inherit the dependence on ``s``. With ``bias=0`` no
column depends on ``s`` at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .tabular import ColumnSpec, Dataset, Schema

PROTECTED = "group"
TASK_A = "outcome_a"
TASK_B = "outcome_b"

FEATURE_NOISE = 0.15
LABEL_NOISE = 0.4

# name -> (spec, factor mix over (b1, b2, u3, u4))
_FEATURES: dict[str, tuple[ColumnSpec, tuple[float, float, float, float]]] = {
    "age": (ColumnSpec.numeric("age", 18, 80), (1, 0, 0, 0)),
    "income": (ColumnSpec.numeric("income", 0, 200), (0, 0, 1, 0)),
    "score": (ColumnSpec.numeric("score", 0, 10), (0, 1, 0, 0)),
    "region": (ColumnSpec.categorical("region", ["north", "east", "south", "west"]), (0, 0, 0, 1)),
    "education": (ColumnSpec.categorical("education", ["basic", "secondary", "higher"]), (0.7, 0, 0.7, 0)),
    "tenure": (ColumnSpec.numeric("tenure", 0, 40), (0, 0, 0, 1)),
    "priors": (ColumnSpec.categorical("priors", ["none", "few", "many"]), (0, 1, 0, 0)),
    "category": (ColumnSpec.categorical("category", ["c1", "c2", "c3", "c4"]), (0, 0, 1, 0)),
    "hours": (ColumnSpec.numeric("hours", 0, 60), (0.7, 0, 0, 0.7)),
    "rating": (ColumnSpec.numeric("rating", 1, 5), (0, 1, 0, 0)),
    "channel": (ColumnSpec.categorical("channel", ["web", "phone", "office"]), (0, 0, 0, 1)),
    "segment": (ColumnSpec.categorical("segment", ["retail", "corporate"]), (0, 0, 1, 0)),
}

SOURCE_FEATURES = tuple(_FEATURES)
# the 10-column table keeps the first seven features
TARGET_FEATURES = SOURCE_FEATURES[:7]

_BINARY = {
    PROTECTED: ColumnSpec.categorical(PROTECTED, ["g0", "g1"]),
    TASK_A: ColumnSpec.categorical(TASK_A, ["no", "yes"]),
    TASK_B: ColumnSpec.categorical(TASK_B, ["no", "yes"]),
}


@dataclass(frozen=True)
class SynthSpec:
    n_rows: int = 20000
    columns: tuple[str, ...] = SOURCE_FEATURES
    bias: float = 0.0
    seed: int = 0
    label: str = TASK_A

    def __post_init__(self):
        if not 0.0 <= self.bias <= 1.0:
            raise ValueError(f"bias must lie in [0, 1], got {self.bias}")
        if self.n_rows < 1:
            raise ValueError("n_rows must be positive")
        unknown = [c for c in self.columns if c not in _FEATURES]
        if unknown:
            raise ValueError(f"unknown synthetic feature columns {unknown}")
        if self.label not in (TASK_A, TASK_B):
            raise ValueError(f"label must be {TASK_A!r} or {TASK_B!r}")


def synth_schema(features=SOURCE_FEATURES, label: str = TASK_A) -> Schema:
    cols = [_BINARY[PROTECTED], _BINARY[TASK_A], _BINARY[TASK_B]]
    cols += [_FEATURES[name][0] for name in features]
    return Schema(tuple(cols), label, PROTECTED)


def synth_generate(spec: SynthSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_rows
    s = rng.integers(0, 2, size=n)
    u = rng.standard_normal((n, 4))
    shift = spec.bias * (2.0 * s - 1.0)
    factors = u.copy()
    factors[:, 0] += shift
    factors[:, 1] += shift
    # noise is drawn for every feature so a column subset sees the same rows
    noise = rng.standard_normal((n, len(_FEATURES)))
    label_noise = rng.standard_normal((n, 2))

    data: dict[str, np.ndarray] = {PROTECTED: s}
    data[TASK_A] = (0.6 * factors[:, 0] + 0.8 * factors[:, 2] + LABEL_NOISE * label_noise[:, 0] > 0).astype(np.int64)
    data[TASK_B] = (0.6 * factors[:, 1] + 0.8 * factors[:, 3] + LABEL_NOISE * label_noise[:, 1] > 0).astype(np.int64)
    for j, (name, (col, mix)) in enumerate(_FEATURES.items()):
        w = np.asarray(mix, dtype=np.float64)
        latent = factors @ (w / np.linalg.norm(w)) + FEATURE_NOISE * noise[:, j]
        q = ndtr(latent)
        if col.is_categorical:
            data[name] = np.minimum((q * col.cardinality).astype(np.int64), col.cardinality - 1)
        else:
            data[name] = col.min + q * (col.max - col.min)
    schema = synth_schema(spec.columns, spec.label)
    return Dataset(schema, {c: data[c] for c in schema.names})


def make_synth_pair(n_rows: int = 20000, bias: float = 0.0, seed: int = 0) -> tuple[Dataset, Dataset]:
    """A 15-column "source" table and an independently drawn 10-column "target" table.

    Target columns are a strict subset of the source columns.
    """
    source = synth_generate(SynthSpec(n_rows, SOURCE_FEATURES, bias, seed))
    target = synth_generate(SynthSpec(n_rows, TARGET_FEATURES, bias, seed + 1))
    return source, target


def plugin_mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in estimate (nats) of I(a; b) for two discrete arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())
