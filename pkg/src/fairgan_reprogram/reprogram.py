"""Reprogramming a frozen classifier + VAE decoder onto a new tabular dataset/task.

A fresh encoder maps the target table's X' x S' block into the VAE latent
space; the frozen decoder turns that into the source X x S block, and the
frozen source classifier labels it. The encoder is trained against:

* cross-entropy of the classifier's output against the target label (weight gamma),
* a realism discriminator D1 on the columns both tables share (GAN, FAIRGAN),
* a fairness discriminator D2 that tries to recover s' from the generated
  features (FAIRGAN, weight delta),
* an l2 penalty (encoder weights, or distance of shared generated columns
  to the real ones).
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import diffnet
from .classifier import Classifier, ClassifierConfig, hard_labels
from .diffnet import MlpConfig, MlpParams
from .metrics import MetricsReport, probe_fairness, realism_check
from .tabular import (
    AlignmentMap,
    align,
    Dataset,
    Schema,
    SchemaError,
    bit_to_index,
    decode_block,
    encode,
    feature_slice_indices,
    feature_width,
    realism_columns,
)
from .vae import VaeModel, block_width, decoder_forward, decoder_input_grad

log = logging.getLogger(__name__)

MODES = ("CLASSIFY_ONLY", "GAN", "FAIRGAN")
L2_TARGETS = ("weights", "data")
SELECTION_PROBES = ("probe", "d2")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config: " + "; ".join(problems))


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ReprogramConfig:
    mode: str = "GAN"
    gamma: float = 0.5
    delta: float = 0.0
    lr: float = 1e-3
    l2: float = 1e-4
    l2_target: str = "weights"
    epochs: int = 30
    batch_size: int = 128
    d_steps: int = 3
    seed: int = 0
    enc_hidden: tuple[int, ...] = (64, 64)
    disc_hidden: tuple[int, ...] = (64, 64)
    disc_activation: str = "relu"
    disc_lr: float | None = None
    d1_noise: float = 0.0
    gumbel_tau: float = 0.2
    beta1: float = 0.9
    ema: float = 0.0
    tv_threshold: float = 0.15
    accuracy_floor: float = 0.12
    patience: int = 10
    eval_every: int = 1
    selection_probe: str = "probe"

    def problems(self) -> list[str]:
        p = []
        if self.mode not in MODES:
            p.append(f"mode: must be one of {MODES}, got {self.mode!r}")
        for name in ("gamma", "delta", "l2", "accuracy_floor", "d1_noise", "gumbel_tau"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and np.isfinite(v) and v >= 0):
                p.append(f"{name}: must be a finite nonnegative number, got {v!r}")
        for name in ("lr", "tv_threshold"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and np.isfinite(v) and v > 0):
                p.append(f"{name}: must be a finite positive number, got {v!r}")
        for name in ("beta1", "ema"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and 0 <= v < 1):
                p.append(f"{name}: must lie in [0, 1), got {v!r}")
        if self.disc_lr is not None and not (self.disc_lr > 0):
            p.append(f"disc_lr: must be positive, got {self.disc_lr!r}")
        for name in ("epochs", "batch_size", "d_steps", "patience", "eval_every"):
            v = getattr(self, name)
            if not (isinstance(v, int) and not isinstance(v, bool) and v > 0):
                p.append(f"{name}: must be a positive integer, got {v!r}")
        if self.disc_activation not in diffnet.HIDDEN_ACTIVATIONS:
            p.append(f"disc_activation: must be one of {diffnet.HIDDEN_ACTIVATIONS}, got {self.disc_activation!r}")
        if self.l2_target not in L2_TARGETS:
            p.append(f"l2_target: must be one of {L2_TARGETS}, got {self.l2_target!r}")
        if self.selection_probe not in SELECTION_PROBES:
            p.append(f"selection_probe: must be one of {SELECTION_PROBES}, got {self.selection_probe!r}")
        return p

    def validate(self) -> "ReprogramConfig":
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self

    @property
    def realism_active(self) -> bool:
        return self.mode in ("GAN", "FAIRGAN")

    @property
    def fairness_active(self) -> bool:
        # delta = 0 switches D2 off entirely
        return self.mode == "FAIRGAN" and self.delta > 0

    @property
    def effective_delta(self) -> float:
        return self.delta if self.fairness_active else 0.0

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["enc_hidden"] = list(self.enc_hidden)
        d["disc_hidden"] = list(self.disc_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ReprogramConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        kw = dict(d)
        for name in ("enc_hidden", "disc_hidden"):
            if name in kw:
                kw[name] = tuple(kw[name])
        return cls(**kw).validate()


# ------------------------------------------------------------------- networks


@dataclass
class Discriminator:
    config: MlpConfig
    params: MlpParams

    def score(self, x: np.ndarray) -> np.ndarray:
        return diffnet.predict(self.config, self.params, x)[:, 0]


def make_discriminator(width: int, hidden: tuple[int, ...], seed, activation: str = "relu") -> Discriminator:
    cfg = MlpConfig((width, *hidden, 1), activation, "sigmoid")
    return Discriminator(cfg, diffnet.init_params(cfg, seed))


@dataclass
class Generator:
    """Trainable encoder feeding the frozen VAE decoder."""

    enc_config: MlpConfig
    enc_params: MlpParams
    vae: VaeModel
    target_schema: Schema
    alignment: AlignmentMap
    shared_columns: list[str]
    source_index: np.ndarray  # D1 slice of the generated feature block
    target_index: np.ndarray  # same columns in the target feature block

    @property
    def source_schema(self) -> Schema:
        return self.vae.schema

    @property
    def latent_dim(self) -> int:
        return self.vae.latent_dim

    @property
    def x_width(self) -> int:
        return feature_width(self.source_schema)

    @property
    def output_width(self) -> int:
        return self.vae.width

    @property
    def d1_spans(self) -> list[tuple[int, int]]:
        """Column ranges of the categorical shared columns inside D1's input slice."""
        spans, at = [], 0
        for name in self.shared_columns:
            spec = self.source_schema.column(name)
            width = spec.cardinality if spec.is_categorical else 1
            if spec.is_categorical:
                spans.append((at, at + width))
            at += width
        return spans

    def inputs(self, data: Dataset) -> np.ndarray:
        if data.schema.feature_columns != self.target_schema.feature_columns:
            raise SchemaError("dataset features do not match the generator's target schema")
        return encode(data).features_and_protected()

    def digest(self) -> str:
        return self.enc_params.digest()


def build_generator(vae: VaeModel, target_schema: Schema, alignment: AlignmentMap,
                    seed=0, hidden: tuple[int, ...] = (64, 64)) -> Generator:
    """Fresh encoder from the target X' x S' width to (mu, logvar) of the VAE latent."""
    if not vae.frozen:
        raise ValueError("the VAE must be frozen before reprogramming")
    source = vae.schema
    src_names = set(source.names)
    tgt_names = set(target_schema.names)
    if set(alignment.shared) != src_names & tgt_names or \
            set(alignment.dropped_from_target) != tgt_names - src_names or \
            set(alignment.added_in_source) != src_names - tgt_names:
        raise SchemaError("alignment does not match the VAE schema and the target schema")
    shared = realism_columns(source, target_schema, alignment)
    cfg = MlpConfig((block_width(target_schema), *hidden, 2 * vae.latent_dim), "relu", "identity")
    return Generator(cfg, diffnet.init_params(cfg, seed), vae, target_schema, alignment, shared,
                     feature_slice_indices(source, shared), feature_slice_indices(target_schema, shared))


@dataclass
class GenPass:
    enc_acts: list[np.ndarray]
    dec_acts: list[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.dec_acts[-1]


def _gen_pass(g: Generator, x: np.ndarray, enc_params: MlpParams | None = None) -> GenPass:
    params = g.enc_params if enc_params is None else enc_params
    enc_acts = diffnet.forward(g.enc_config, params, x)
    z = enc_acts[-1][:, : g.latent_dim]
    return GenPass(enc_acts, decoder_forward(g.vae, z))


def generator_forward(g: Generator, batch: np.ndarray) -> np.ndarray:
    """Encoded X' x S' rows -> encoded X x S rows, through the posterior-mean path."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != g.enc_config.input_width:
        raise SchemaError(f"batch width {x.shape[-1]} does not match generator input {g.enc_config.input_width}")
    return _gen_pass(g, x).output


def _gen_backward(g: Generator, gp: GenPass, g_out: np.ndarray, enc_params: MlpParams | None = None) -> MlpParams:
    params = g.enc_params if enc_params is None else enc_params
    g_z = decoder_input_grad(g.vae, gp.dec_acts, g_out)
    g_enc_out = np.concatenate([g_z, np.zeros_like(g_z)], axis=1)
    grads, _ = diffnet.backward(g.enc_config, params, gp.enc_acts, g_enc_out)
    return grads


# ----------------------------------------------------------------------- loss


_TINY = 1e-12


def relax_categoricals(x: np.ndarray, spans: list[tuple[int, int]], gumbel: np.ndarray, tau: float) -> np.ndarray:
    """Gumbel-softmax draw from each categorical block of probabilities ``x``.

    Numeric columns pass through. Small ``tau`` gives near one-hot rows, so a
    discriminator cannot tell generated categoricals apart by their softness.
    """
    y = x.copy()
    for a, b in spans:
        z = (np.log(np.maximum(x[:, a:b], _TINY)) + gumbel[:, a:b]) / tau
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        y[:, a:b] = e / e.sum(axis=1, keepdims=True)
    return y


def relax_backward(x: np.ndarray, y: np.ndarray, spans: list[tuple[int, int]], tau: float,
                   upstream: np.ndarray) -> np.ndarray:
    g = upstream.copy()
    for a, b in spans:
        yb, gb = y[:, a:b], upstream[:, a:b]
        g_z = yb * (gb - (yb * gb).sum(axis=1, keepdims=True))
        # log is clamped at _TINY, where the derivative is zero
        g[:, a:b] = np.where(x[:, a:b] > _TINY, g_z / (tau * np.maximum(x[:, a:b], _TINY)), 0.0)
    return g


@dataclass
class Batch:
    x: np.ndarray  # encoded X' x S'
    y: np.ndarray  # target labels
    s: np.ndarray  # protected bits
    noise: np.ndarray | None = None  # instance noise added to D1's generated input
    gumbel: np.ndarray | None = None  # Gumbel draws for relaxing D1's generated categoricals

    @property
    def real_features(self) -> np.ndarray:
        return self.x[:, :-1]


def make_batch(g: Generator, data: Dataset) -> Batch:
    return Batch(g.inputs(data), np.asarray(data.labels, dtype=np.int64),
                 np.asarray(data.protected, dtype=np.int64))


@dataclass
class LossResult:
    total: float
    terms: dict[str, float]
    enc_grads: MlpParams


def combined_loss(
    g: Generator,
    d1: Discriminator | None,
    d2: Discriminator | None,
    clf: Classifier,
    batch: Batch,
    config: ReprogramConfig,
    enc_params: MlpParams | None = None,
) -> LossResult:
    """Encoder objective and its gradient.

    ``total = realism + l2 + gamma * classification + delta * fairness`` where
    ``realism`` is -log D1(shared generated columns) and ``fairness`` is the
    cross-entropy of D2's score against a 0.5 target. Terms of inactive
    discriminators are exactly zero; ``terms`` holds the unweighted values
    (``l2`` already includes its coefficient).
    """
    params = g.enc_params if enc_params is None else enc_params
    n = batch.x.shape[0]
    gp = _gen_pass(g, batch.x, params)
    out = gp.output
    gx = out[:, : g.x_width]
    g_out = np.zeros_like(out)

    c_acts = diffnet.forward(clf.config, clf.params, gx)
    ce, g_probs = diffnet.cross_entropy(c_acts[-1], batch.y)
    _, g_gx = diffnet.backward(clf.config, clf.params, c_acts, config.gamma * g_probs)
    g_out[:, : g.x_width] += g_gx

    realism = 0.0
    if config.realism_active:
        if d1 is None:
            raise ValueError("GAN/FAIRGAN mode needs a realism discriminator")
        raw = gx[:, g.source_index]
        d_in = raw
        if batch.gumbel is not None:
            d_in = relax_categoricals(raw, g.d1_spans, batch.gumbel, config.gumbel_tau)
        relaxed = d_in
        if batch.noise is not None:
            d_in = d_in + batch.noise
        acts = diffnet.forward(d1.config, d1.params, d_in)
        realism, gs = diffnet.bce(acts[-1], 1.0)
        _, g_in = diffnet.backward(d1.config, d1.params, acts, gs)
        if batch.gumbel is not None:
            g_in = relax_backward(raw, relaxed, g.d1_spans, config.gumbel_tau, g_in)
        np.add.at(g_out, (slice(None), g.source_index), g_in)

    fairness = 0.0
    if config.fairness_active:
        if d2 is None:
            raise ValueError("FAIRGAN mode with delta > 0 needs a fairness discriminator")
        acts = diffnet.forward(d2.config, d2.params, gx)
        fairness, gs = diffnet.bce(acts[-1], 0.5)
        _, g_in = diffnet.backward(d2.config, d2.params, acts, config.delta * gs)
        g_out[:, : g.x_width] += g_in

    if config.l2_target == "data":
        diff = gx[:, g.source_index] - batch.real_features[:, g.target_index]
        l2 = config.l2 * float((diff * diff).sum()) / n
        np.add.at(g_out, (slice(None), g.source_index), 2.0 * config.l2 * diff / n)
        l2_grads = None
    else:
        l2, l2_grads = diffnet.l2_penalty(params, config.l2)

    grads = _gen_backward(g, gp, g_out, params)
    if l2_grads is not None:
        grads = grads + l2_grads
    total = realism + l2 + config.gamma * ce + config.effective_delta * fairness
    terms = {"classification": ce, "realism": realism, "fairness": fairness, "l2": l2}
    return LossResult(total, terms, grads)


def discriminator_step_grads(d: Discriminator, x: np.ndarray, labels: np.ndarray) -> tuple[float, MlpParams]:
    acts = diffnet.forward(d.config, d.params, x)
    loss, gs = diffnet.bce(acts[-1], np.asarray(labels, dtype=np.float64)[:, None])
    grads, _ = diffnet.backward(d.config, d.params, acts, gs)
    return loss, grads


def d1_loss(d1: Discriminator, real: np.ndarray, fake: np.ndarray) -> tuple[float, MlpParams]:
    """Mean BCE on real rows (label 1) plus mean BCE on generated rows (label 0)."""
    lr_, gr = discriminator_step_grads(d1, real, np.ones(len(real)))
    lf, gf = discriminator_step_grads(d1, fake, np.zeros(len(fake)))
    return lr_ + lf, gr + gf


# ------------------------------------------------------------------ evaluation


def generate_cleaned(g: Generator, data: Dataset, clf: Classifier) -> Dataset:
    """Generated rows over the source schema: decoded G_x, G_s, and the classifier's label."""
    out = generator_forward(g, g.inputs(data))
    gx = out[:, : g.x_width]
    schema = g.source_schema
    cols = decode_block(schema, gx)
    cols[schema.protected_column] = bit_to_index(out[:, g.x_width])
    cols[schema.label_column] = hard_labels(diffnet.predict(clf.config, clf.params, gx))
    return Dataset(schema, cols)


def reprogrammed_accuracy(g: Generator, clf: Classifier, data: Dataset) -> float:
    gx = generator_forward(g, g.inputs(data))[:, : g.x_width]
    pred = hard_labels(diffnet.predict(clf.config, clf.params, gx))
    return float((pred == data.labels).mean())


def evaluate_fairness(g: Generator, data: Dataset, clf: Classifier | None = None, seed: int = 0,
                      probe_config: ClassifierConfig | None = None) -> float:
    """Held-out accuracy of a fresh probe predicting s' from the cleaned generated features."""
    if len(np.unique(data.protected)) < 2:
        raise ValueError("protected attribute has a single class in this data")
    out = generator_forward(g, g.inputs(data))
    feats = decode_block(g.source_schema, out[:, : g.x_width])
    schema = g.source_schema
    feats[schema.protected_column] = np.zeros(len(data), dtype=np.int64)
    feats[schema.label_column] = np.zeros(len(data), dtype=np.int64)
    x = encode(Dataset(schema, feats)).features
    return probe_fairness(x, data.protected, seed, probe_config)


def d2_accuracy(g: Generator, d2: Discriminator, data: Dataset) -> float:
    gx = generator_forward(g, g.inputs(data))[:, : g.x_width]
    return float(((d2.score(gx) > 0.5).astype(np.int64) == data.protected).mean())


# -------------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    terms: dict[str, float]
    val_accuracy: float
    max_tv: float | None = None
    realism_pass: bool | None = None
    fairness: float | None = None

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "terms": self.terms, "val_accuracy": self.val_accuracy,
                "max_tv": self.max_tv, "realism_pass": self.realism_pass, "fairness": self.fairness}


@dataclass
class ReprogramResult:
    generator: Generator
    d1: Discriminator | None
    d2: Discriminator | None
    report: MetricsReport
    history: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int = 0


def _select(history: list[EpochRecord], config: ReprogramConfig) -> tuple[int, str]:
    """Index of the checkpoint to keep, and how it was chosen."""
    best_acc = max(h.val_accuracy for h in history)
    if not config.realism_active:
        return max(range(len(history)), key=lambda i: (history[i].val_accuracy, -i)), "accuracy"
    ok = [i for i, h in enumerate(history)
          if h.realism_pass and h.val_accuracy >= best_acc - config.accuracy_floor]
    if config.fairness_active:
        pool = ok or list(range(len(history)))
        pick = min(pool, key=lambda i: (abs(history[i].fairness - 0.5), -history[i].val_accuracy, i))
        return pick, "fairness" if ok else "fairness-fallback"
    if ok:
        return max(ok, key=lambda i: (history[i].val_accuracy, -i)), "accuracy-realism"
    return min(range(len(history)), key=lambda i: (history[i].max_tv, i)), "realism-fallback"


def _rngs(seed: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]


def train_reprogram(
    g: Generator,
    clf: Classifier,
    train: Dataset,
    val: Dataset,
    config: ReprogramConfig,
    test: Dataset | None = None,
    scenario: str = "custom",
    baseline_accuracy: float | None = None,
) -> ReprogramResult:
    """Alternate D1 / D2 / encoder updates per batch and keep the selected checkpoint.

    ``g`` is updated in place; its encoder is re-initialised from ``config.seed``. Final metrics are computed on ``test`` when
    given, otherwise on ``val``.
    """
    config.validate()
    started = time.perf_counter()
    if clf.schema.feature_columns != g.source_schema.feature_columns:
        raise SchemaError("classifier and VAE were trained on different feature columns")
    if clf.include_protected:
        raise SchemaError("reprogramming needs a classifier without the protected input")
    clf_digest, vae_digest = clf.digest(), g.vae.digest()
    rng_enc, rng_d1, rng_d2, rng_order, rng_noise = _rngs(config.seed)
    g.enc_params = diffnet.init_params(g.enc_config, rng_enc)
    d1 = make_discriminator(len(g.source_index), config.disc_hidden, rng_d1, config.disc_activation) if config.realism_active else None
    d2 = make_discriminator(g.x_width, config.disc_hidden, rng_d2, config.disc_activation) if config.fairness_active else None
    disc_lr = config.disc_lr or config.lr
    enc_opt = diffnet.Adam(g.enc_params, lr=config.lr, beta1=config.beta1)
    d1_opt = diffnet.Adam(d1.params, lr=disc_lr, beta1=config.beta1) if d1 else None
    d2_opt = diffnet.Adam(d2.params, lr=disc_lr, beta1=config.beta1) if d2 else None
    # averaged encoder weights, used for evaluation and as the returned generator
    averaged = g.enc_params.copy() if config.ema > 0 else None

    full = make_batch(g, train)
    n = len(full.x)
    history: list[EpochRecord] = []
    snapshots: list[tuple] = []
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = rng_order.permutation(n)
        sums = {"classification": 0.0, "realism": 0.0, "fairness": 0.0, "l2": 0.0, "total": 0.0, "d1": 0.0, "d2": 0.0}
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            b = Batch(full.x[idx], full.y[idx], full.s[idx])
            for _ in range(config.d_steps if (d1 or d2) else 0):
                gx = generator_forward(g, b.x)[:, : g.x_width]
                if d1 is not None:
                    real, fake = b.real_features[:, g.target_index], gx[:, g.source_index]
                    if config.gumbel_tau > 0:
                        fake = relax_categoricals(fake, g.d1_spans, rng_noise.gumbel(size=fake.shape),
                                                  config.gumbel_tau)
                    if config.d1_noise > 0:
                        real = real + config.d1_noise * rng_noise.standard_normal(real.shape)
                        fake = fake + config.d1_noise * rng_noise.standard_normal(fake.shape)
                    loss, grads = d1_loss(d1, real, fake)
                    d1.params = d1_opt.step(grads)
                    sums["d1"] += loss * len(idx) / config.d_steps
                if d2 is not None:
                    loss, grads = discriminator_step_grads(d2, gx, b.s)
                    d2.params = d2_opt.step(grads)
                    sums["d2"] += loss * len(idx) / config.d_steps
            if d1 is not None and config.gumbel_tau > 0:
                b.gumbel = rng_noise.gumbel(size=(len(idx), len(g.source_index)))
            if d1 is not None and config.d1_noise > 0:
                b.noise = config.d1_noise * rng_noise.standard_normal((len(idx), len(g.source_index)))
            res = combined_loss(g, d1, d2, clf, b, config)
            if not np.isfinite(res.total):
                raise DivergenceError(f"encoder loss is {res.total} at epoch {epoch}; terms {res.terms}")
            g.enc_params = enc_opt.step(res.enc_grads)
            if averaged is not None:
                averaged = averaged.combine(g.enc_params, lambda a, b: config.ema * a + (1.0 - config.ema) * b)
            for k, v in res.terms.items():
                sums[k] += v * len(idx)
            sums["total"] += res.total * len(idx)
        if epoch % config.eval_every and epoch != config.epochs:
            continue
        terms = {k: v / n for k, v in sums.items()}
        live = g.enc_params
        if averaged is not None:
            g.enc_params = averaged
        rec = EpochRecord(epoch, terms, reprogrammed_accuracy(g, clf, val))
        if config.realism_active:
            rr = realism_check(val, generate_cleaned(g, val, clf), g.shared_columns, config.tv_threshold)
            rec.max_tv = max(rr.column_tv.values())
            rec.realism_pass = rr.passed
        if config.fairness_active:
            if config.selection_probe == "d2":
                rec.fairness = d2_accuracy(g, d2, val)
            else:
                rec.fairness = evaluate_fairness(g, val, seed=config.seed + epoch)
        history.append(rec)
        snapshots.append((g.enc_params.copy(), d1.params.copy() if d1 else None, d2.params.copy() if d2 else None))
        g.enc_params = live
        log.debug("epoch %d: %s", epoch, rec.to_dict())
        if not config.realism_active:
            # plain accuracy early stopping; GAN modes always run to max epochs
            if len(history) == 1 or rec.val_accuracy > max(h.val_accuracy for h in history[:-1]):
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break

    pick, how = _select(history, config)
    g.enc_params = snapshots[pick][0]
    if d1 is not None:
        d1.params = snapshots[pick][1]
    if d2 is not None:
        d2.params = snapshots[pick][2]
    enc_opt.params = g.enc_params

    if clf.digest() != clf_digest or g.vae.digest() != vae_digest:
        raise RuntimeError("frozen classifier or decoder parameters changed during reprogramming")

    final = test if test is not None else val
    report = MetricsReport(
        scenario=scenario,
        mode=config.mode,
        gamma=float(config.gamma),
        delta=float(config.delta),
        lr=float(config.lr),
        seed=int(config.seed),
        accuracy=reprogrammed_accuracy(g, clf, final),
        baseline_accuracy=baseline_accuracy,
        tv_threshold=float(config.tv_threshold),
    )
    if config.realism_active or config.mode == "CLASSIFY_ONLY":
        rr = realism_check(final, generate_cleaned(g, final, clf), g.shared_columns, config.tv_threshold)
        report.column_tv = rr.column_tv
        report.realism_pass = rr.passed if config.realism_active else None
    if len(np.unique(final.protected)) == 2:
        report.fairness_probe = evaluate_fairness(g, final, seed=config.seed)
    if d2 is not None:
        report.d2_accuracy = d2_accuracy(g, d2, final)
    report.details = {
        "selected_epoch": history[pick].epoch,
        "selection": how,
        "val_accuracy": history[pick].val_accuracy,
        "terms": history[pick].terms,
        "epochs_run": history[-1].epoch,
        "shared_columns": list(g.shared_columns),
        "config": config.to_dict(),
    }
    report.wall_clock = time.perf_counter() - started
    return ReprogramResult(g, d1, d2, report, history, history[pick].epoch)


def with_mode(config: ReprogramConfig, **kw) -> ReprogramConfig:
    return replace(config, **kw).validate()


# ---------------------------------------------------------------- checkpoints


def save_generator(g: Generator, path: str | Path) -> None:
    """Store the trained encoder; the frozen VAE is referenced by digest only."""
    d = {
        "kind": "generator",
        "target_schema": g.target_schema.to_dict(),
        "vae_digest": g.vae.digest(),
        "encoder": diffnet.params_to_dict(g.enc_config, g.enc_params),
    }
    Path(path).write_text(json.dumps(d))


def load_generator(path: str | Path, vae: VaeModel) -> Generator:
    d = json.loads(Path(path).read_text())
    if d.get("kind") != "generator":
        raise ValueError("not a generator checkpoint")
    if d["vae_digest"] != vae.digest():
        raise ValueError("generator checkpoint was trained against a different VAE")
    schema = Schema.from_dict(d["target_schema"])
    cfg, params = diffnet.params_from_dict(d["encoder"])
    g = build_generator(vae, schema, align(vae.schema, schema), hidden=tuple(cfg.layer_widths[1:-1]))
    g.enc_params = params
    return g


def save_discriminator(d: Discriminator, path: str | Path) -> None:
    Path(path).write_text(json.dumps({"kind": "discriminator", "network": diffnet.params_to_dict(d.config, d.params)}))


def load_discriminator(path: str | Path) -> Discriminator:
    d = json.loads(Path(path).read_text())
    if d.get("kind") != "discriminator":
        raise ValueError("not a discriminator checkpoint")
    return Discriminator(*diffnet.params_from_dict(d["network"]))
