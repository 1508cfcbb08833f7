"""VAE over the X x S block whose frozen decoder is the generator's output stage."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffnet
from .diffnet import MlpConfig, MlpParams
from .tabular import Dataset, Schema, SchemaError, bit_to_index, decode_block, encode, feature_width

log = logging.getLogger(__name__)


class NotFrozenError(RuntimeError):
    pass


@dataclass(frozen=True)
class VaeConfig:
    latent_dim: int = 10
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    # weight on squared error of numeric columns; 1/(2 sigma^2) of a fixed-variance Gaussian
    numeric_weight: float = 500.0
    # weight on cross-entropy of categorical columns and the protected bit
    categorical_weight: float = 4.0


def output_groups(schema: Schema) -> list[tuple[int, int, str]]:
    """Decoder output activation per column of the X x S block."""
    groups, pos = [], 0
    for spec in schema.feature_columns:
        if spec.is_categorical:
            groups.append((pos, pos + spec.cardinality, "softmax"))
            pos += spec.cardinality
        else:
            groups.append((pos, pos + 1, "sigmoid"))
            pos += 1
    groups.append((pos, pos + 1, "sigmoid"))
    return groups


def block_width(schema: Schema) -> int:
    return feature_width(schema) + 1


@dataclass
class LatentBatch:
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray
    noise: np.ndarray | None = None


def reparameterize(mu: np.ndarray, logvar: np.ndarray, noise: np.ndarray) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if not (mu.shape == logvar.shape == noise.shape):
        raise ValueError("mu, logvar and noise must share a shape")
    return mu + np.exp(0.5 * logvar) * noise


def kl_term(mu: np.ndarray, logvar: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """KL(q || N(0, I)) summed over latent dims, averaged over rows, with its gradients."""
    n = mu.shape[0]
    kl = 0.5 * (mu * mu + np.exp(logvar) - 1.0 - logvar).sum(axis=1)
    return float(kl.mean()), mu / n, 0.5 * (np.exp(logvar) - 1.0) / n


@dataclass
class VaeModel:
    schema: Schema
    enc_config: MlpConfig
    enc_params: MlpParams
    dec_config: MlpConfig
    dec_params: MlpParams
    latent_dim: int
    numeric_weight: float = 500.0
    categorical_weight: float = 4.0
    frozen: bool = False
    history: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.dec_config.output_width

    def freeze(self) -> "VaeModel":
        self.frozen = True
        return self

    def digest(self) -> str:
        return self.enc_params.digest() + self.dec_params.digest()

    def encode_mean(self, block: np.ndarray) -> np.ndarray:
        return diffnet.predict(self.enc_config, self.enc_params, block)[:, : self.latent_dim]

    def to_dict(self) -> dict:
        return {
            "kind": "vae",
            "schema": self.schema.to_dict(),
            "latent_dim": self.latent_dim,
            "numeric_weight": self.numeric_weight,
            "categorical_weight": self.categorical_weight,
            "encoder": diffnet.params_to_dict(self.enc_config, self.enc_params),
            "decoder": diffnet.params_to_dict(self.dec_config, self.dec_params),
            "history": [list(h) for h in self.history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VaeModel":
        if d.get("kind") != "vae":
            raise ValueError("not a VAE checkpoint")
        ec, ep = diffnet.params_from_dict(d["encoder"])
        dc, dp = diffnet.params_from_dict(d["decoder"])
        return cls(Schema.from_dict(d["schema"]), ec, ep, dc, dp, int(d["latent_dim"]),
                   float(d["numeric_weight"]), float(d["categorical_weight"]), True, [tuple(h) for h in d.get("history", [])])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "VaeModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_vae(schema: Schema, config: VaeConfig | None = None, seed: int = 0) -> VaeModel:
    config = config or VaeConfig()
    width = block_width(schema)
    if config.latent_dim >= width:
        log.warning("latent_dim %d >= encoded width %d: the VAE is degenerate", config.latent_dim, width)
    rng = np.random.default_rng(seed)
    enc = MlpConfig((width, *config.hidden, 2 * config.latent_dim), config.activation, "identity")
    dec = MlpConfig((config.latent_dim, *config.hidden, width), config.activation, "grouped",
                    tuple(output_groups(schema)))
    return VaeModel(schema, enc, diffnet.init_params(enc, rng), dec, diffnet.init_params(dec, rng),
                    config.latent_dim, config.numeric_weight, config.categorical_weight)


def reconstruction_loss(schema: Schema, target: np.ndarray, out: np.ndarray,
                        numeric_weight: float, categorical_weight: float = 1.0) -> tuple[float, np.ndarray]:
    """Per-column reconstruction loss (row mean) and its gradient w.r.t. decoder outputs.

    Weighted cross-entropy for categorical groups and the protected bit,
    weighted squared error for numeric columns.
    """
    cw = categorical_weight
    n = target.shape[0]
    total = np.zeros(n)
    grad = np.zeros_like(out)
    clamp = diffnet.PROB_CLAMP
    for start, stop, kind in output_groups(schema):
        x = target[:, start:stop]
        p = out[:, start:stop]
        if kind == "softmax":
            pc = np.maximum(p, clamp)
            total -= cw * (x * np.log(pc)).sum(axis=1)
            grad[:, start:stop] = -cw * x / pc / n
        elif stop == out.shape[1]:
            pc = np.clip(p, clamp, 1.0 - clamp)
            total -= cw * (x * np.log(pc) + (1.0 - x) * np.log(1.0 - pc)).sum(axis=1)
            grad[:, start:stop] = cw * (-(x / pc) + (1.0 - x) / (1.0 - pc)) / n
        else:
            d = p - x
            total += numeric_weight * (d * d).sum(axis=1)
            grad[:, start:stop] = 2.0 * numeric_weight * d / n
    return float(total.mean()), grad


@dataclass
class ElboResult:
    loss: float
    reconstruction: float
    kl: float
    enc_grads: MlpParams
    dec_grads: MlpParams


def elbo_loss(batch: np.ndarray, model: VaeModel, noise: np.ndarray) -> ElboResult:
    """Negative ELBO (reconstruction + KL) on an X x S block, averaged over rows."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.width:
        raise SchemaError(f"batch width {x.shape[-1]} does not match VAE width {model.width}")
    k = model.latent_dim
    enc_acts = diffnet.forward(model.enc_config, model.enc_params, x)
    mu, logvar = enc_acts[-1][:, :k], enc_acts[-1][:, k:]
    z = reparameterize(mu, logvar, noise)
    dec_acts = diffnet.forward(model.dec_config, model.dec_params, z)
    rec, g_out = reconstruction_loss(model.schema, x, dec_acts[-1], model.numeric_weight,
                                     model.categorical_weight)
    kl, g_mu_kl, g_lv_kl = kl_term(mu, logvar)
    dec_grads, g_z = diffnet.backward(model.dec_config, model.dec_params, dec_acts, g_out)
    std = np.exp(0.5 * logvar)
    g_mu = g_z + g_mu_kl
    g_lv = g_z * noise * 0.5 * std + g_lv_kl
    enc_grads, _ = diffnet.backward(model.enc_config, model.enc_params, enc_acts,
                                    np.concatenate([g_mu, g_lv], axis=1))
    return ElboResult(rec + kl, rec, kl, enc_grads, dec_grads)


def _block(data: Dataset, schema: Schema) -> np.ndarray:
    if data.schema.feature_columns != schema.feature_columns or \
            data.schema.protected_column != schema.protected_column:
        raise SchemaError("dataset does not match the VAE's base schema")
    return encode(data).features_and_protected()


def decode_frozen(model: VaeModel, z: np.ndarray | LatentBatch) -> np.ndarray:
    """Decoder forward pass on latent codes; the model must be frozen."""
    if not model.frozen:
        raise NotFrozenError("decode_frozen needs a frozen VAE")
    zz = z.z if isinstance(z, LatentBatch) else z
    return diffnet.predict(model.dec_config, model.dec_params, zz)


def decoder_forward(model: VaeModel, z: np.ndarray) -> list[np.ndarray]:
    if not model.frozen:
        raise NotFrozenError("the decoder is only usable as a generator stage once frozen")
    return diffnet.forward(model.dec_config, model.dec_params, z)


def decoder_input_grad(model: VaeModel, acts: list[np.ndarray], upstream: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the latent input; decoder weight gradients are discarded."""
    _, g_z = diffnet.backward(model.dec_config, model.dec_params, acts, upstream)
    return g_z


def block_to_columns(schema: Schema, block: np.ndarray) -> dict[str, np.ndarray]:
    """Decode an X x S block into category indices / raw numerics per column."""
    fw = feature_width(schema)
    data = decode_block(schema, block[:, :fw])
    data[schema.protected_column] = bit_to_index(block[:, fw])
    return data


def reconstruct(model: VaeModel, dataset: Dataset) -> Dataset:
    """Deterministic reconstruction through the posterior mean. Labels pass through."""
    x = _block(dataset, model.schema)
    out = diffnet.predict(model.dec_config, model.dec_params, model.encode_mean(x))
    data = block_to_columns(dataset.schema, out)
    data[dataset.schema.label_column] = dataset.labels
    return Dataset(dataset.schema, data)


def _mean_elbo(model: VaeModel, x: np.ndarray, noise: np.ndarray, chunk: int = 4096) -> float:
    total = 0.0
    for start in range(0, len(x), chunk):
        r = elbo_loss(x[start:start + chunk], model, noise[start:start + chunk])
        total += r.loss * len(x[start:start + chunk])
    return total / len(x)


@dataclass
class VaeReport:
    val_elbo: float
    column_tv: dict[str, float]
    history: list[tuple[int, float, float]]


def train_vae(train: Dataset, val: Dataset, config: VaeConfig | None = None, seed: int = 0) -> tuple[VaeModel, VaeReport]:
    """Fit the VAE with Adam on the X x S block; returns the frozen best-validation model."""
    from .metrics import reconstruction_tv

    config = config or VaeConfig()
    model = init_vae(train.schema, config, seed)
    x, x_val = _block(train, model.schema), _block(val, model.schema)
    rng = np.random.default_rng(seed + 1)
    val_noise = np.random.default_rng(seed + 2).standard_normal((len(x_val), config.latent_dim))
    enc_opt = diffnet.Adam(model.enc_params, lr=config.lr)
    dec_opt = diffnet.Adam(model.dec_params, lr=config.lr)
    best = (np.inf, model.enc_params, model.dec_params)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x))
        running, seen = 0.0, 0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            noise = rng.standard_normal((len(idx), config.latent_dim))
            r = elbo_loss(x[idx], model, noise)
            model.enc_params = enc_opt.step(r.enc_grads)
            model.dec_params = dec_opt.step(r.dec_grads)
            running += r.loss * len(idx)
            seen += len(idx)
        if not np.isfinite(running):
            raise FloatingPointError(f"VAE training diverged at epoch {epoch}")
        val_loss = _mean_elbo(model, x_val, val_noise)
        history.append((epoch, running / seen, val_loss))
        if val_loss < best[0]:
            best = (val_loss, model.enc_params.copy(), model.dec_params.copy())
    model.enc_params, model.dec_params = best[1], best[2]
    model.history = history
    model.freeze()
    tv = reconstruction_tv(val, reconstruct(model, val))
    return model, VaeReport(best[0], tv, history)
