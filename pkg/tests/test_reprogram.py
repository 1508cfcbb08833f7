import dataclasses

import numpy as np
import pytest

from fairgan_reprogram import diffnet
from fairgan_reprogram.classifier import ClassifierConfig, train_classifier
from fairgan_reprogram.reprogram import (
    Batch,
    ConfigError,
    ReprogramConfig,
    build_generator,
    combined_loss,
    generate_cleaned,
    generator_forward,
    load_discriminator,
    load_generator,
    make_batch,
    make_discriminator,
    relax_backward,
    relax_categoricals,
    reprogrammed_accuracy,
    save_discriminator,
    save_generator,
    train_reprogram,
)
from fairgan_reprogram.synth import make_synth_pair
from fairgan_reprogram.tabular import align, split
from fairgan_reprogram.vae import VaeConfig, train_vae


def _jitter(params, seed):
    rng = np.random.default_rng(seed)
    params.biases = [rng.normal(scale=0.1, size=b.shape) for b in params.biases]
    return params


@pytest.fixture(scope="module")
def world():
    source, target = make_synth_pair(800, bias=0.5, seed=0)
    s_tr, s_va, _ = split(source, seed=0)
    t_tr, t_va, t_te = split(target, seed=0)
    clf = train_classifier(s_tr, s_va, ClassifierConfig(hidden=(8, 8), activation="tanh", max_epochs=3), seed=0)
    vae, _ = train_vae(s_tr, s_va, VaeConfig(latent_dim=4, hidden=(8, 8), activation="tanh", epochs=2), seed=0)
    return dict(clf=clf, vae=vae, t_tr=t_tr, t_va=t_va, t_te=t_te, target=target)


def _setup(world, seed=0, n=12):
    g = build_generator(world["vae"], world["target"].schema, align(world["vae"].schema, world["target"].schema),
                        seed=seed, hidden=(8, 8))
    _jitter(g.enc_params, seed + 10)
    d1 = make_discriminator(len(g.source_index), (8, 8), seed + 1, "tanh")
    d2 = make_discriminator(g.x_width, (8, 8), seed + 2, "tanh")
    _jitter(d1.params, seed + 11)
    _jitter(d2.params, seed + 12)
    b = make_batch(g, world["t_tr"].take(np.arange(n)))
    return g, d1, d2, b


def _relax_oracle(x, spans, gumbel, tau):
    y = x.copy()
    for a, b in spans:
        logits = (np.log(np.maximum(x[:, a:b], 1e-12)) + gumbel[:, a:b]) / tau
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        y[:, a:b] = e / e.sum(axis=1, keepdims=True)
    return y


def _terms_oracle(g, d1, d2, clf, b, cfg):
    """Each loss term recomputed from plain forward passes."""
    k = g.latent_dim
    mu = diffnet.predict(g.enc_config, g.enc_params, b.x)[:, :k]
    out = diffnet.predict(g.vae.dec_config, g.vae.dec_params, mu)
    gx = out[:, : g.x_width]
    p = diffnet.predict(clf.config, clf.params, gx)
    ce = -np.mean(np.log(p[np.arange(len(b.y)), b.y]))
    realism = 0.0
    if cfg.mode != "CLASSIFY_ONLY":
        d_in = gx[:, g.source_index]
        if b.gumbel is not None:
            d_in = _relax_oracle(d_in, g.d1_spans, b.gumbel, cfg.gumbel_tau)
        if b.noise is not None:
            d_in = d_in + b.noise
        realism = -np.mean(np.log(d1.score(d_in)))
    fairness = 0.0
    if cfg.mode == "FAIRGAN" and cfg.delta > 0:
        s = d2.score(gx)
        fairness = -np.mean(0.5 * np.log(s) + 0.5 * np.log(1 - s))
    if cfg.l2_target == "weights":
        l2 = cfg.l2 * sum(float((w ** 2).sum()) for w in g.enc_params.weights)
    else:
        diff = gx[:, g.source_index] - b.x[:, :-1][:, g.target_index]
        l2 = cfg.l2 * float((diff ** 2).sum(axis=1).mean())
    return dict(classification=ce, realism=realism, fairness=fairness, l2=l2)


CASES = [
    ReprogramConfig(mode="CLASSIFY_ONLY", gamma=1.0),
    ReprogramConfig(mode="GAN", gamma=0.5),
    ReprogramConfig(mode="GAN", gamma=2.0, l2=0.01, l2_target="data"),
    ReprogramConfig(mode="FAIRGAN", gamma=0.7, delta=1.5),
    ReprogramConfig(mode="FAIRGAN", gamma=0.7, delta=1.5, gumbel_tau=0.5, d1_noise=0.1),
]


@pytest.mark.parametrize("cfg", CASES, ids=lambda c: f"{c.mode}-{c.l2_target}-{c.gumbel_tau}")
def test_combined_loss_is_sum_of_independent_terms(world, cfg):
    g, d1, d2, b = _setup(world)
    rng = np.random.default_rng(5)
    if cfg.gumbel_tau > 0:
        b.gumbel = rng.gumbel(size=(len(b.x), len(g.source_index)))
    if cfg.d1_noise > 0:
        b.noise = cfg.d1_noise * rng.standard_normal((len(b.x), len(g.source_index)))
    res = combined_loss(g, d1, d2, world["clf"], b, cfg)
    oracle = _terms_oracle(g, d1, d2, world["clf"], b, cfg)
    for name, v in oracle.items():
        assert res.terms[name] == pytest.approx(v, rel=1e-6, abs=1e-12), name
    expected = oracle["realism"] + oracle["l2"] + cfg.gamma * oracle["classification"] + cfg.delta * oracle["fairness"]
    assert res.total == pytest.approx(expected, rel=1e-6)


def test_classify_only_zeroes_adversarial_terms(world):
    g, d1, d2, b = _setup(world)
    res = combined_loss(g, d1, d2, world["clf"], b, ReprogramConfig(mode="CLASSIFY_ONLY", delta=3.0))
    assert res.terms["realism"] == 0.0 and res.terms["fairness"] == 0.0
    bare = combined_loss(g, None, None, world["clf"], b, ReprogramConfig(mode="CLASSIFY_ONLY", delta=3.0))
    assert bare.total == res.total
    assert bare.enc_grads.digest() == res.enc_grads.digest()


def test_fairgan_with_zero_delta_is_gan_bit_for_bit(world):
    g, d1, d2, b = _setup(world)
    gan = combined_loss(g, d1, None, world["clf"], b, ReprogramConfig(mode="GAN"))
    fair = combined_loss(g, d1, d2, world["clf"], b, ReprogramConfig(mode="FAIRGAN", delta=0.0))
    assert gan.total == fair.total and gan.terms == fair.terms
    assert gan.enc_grads.digest() == fair.enc_grads.digest()


def test_adversarial_modes_need_discriminators(world):
    g, d1, _, b = _setup(world)
    with pytest.raises(ValueError):
        combined_loss(g, None, None, world["clf"], b, ReprogramConfig(mode="GAN"))
    with pytest.raises(ValueError):
        combined_loss(g, d1, None, world["clf"], b, ReprogramConfig(mode="FAIRGAN", delta=1.0))


@pytest.mark.parametrize("cfg", CASES, ids=lambda c: f"{c.mode}-{c.l2_target}-{c.gumbel_tau}")
def test_encoder_gradient_matches_finite_differences(world, cfg):
    g, d1, d2, b = _setup(world, seed=3, n=6)
    rng = np.random.default_rng(7)
    if cfg.gumbel_tau > 0:
        b.gumbel = rng.gumbel(size=(len(b.x), len(g.source_index)))
    if cfg.d1_noise > 0:
        b.noise = cfg.d1_noise * rng.standard_normal((len(b.x), len(g.source_index)))

    def fn(p):
        r = combined_loss(g, d1, d2, world["clf"], b, cfg, enc_params=p)
        return r.total, r.enc_grads
    rep = diffnet.grad_check(g.enc_params, fn, tolerance=1e-4, step=1e-5)
    assert rep.passed, rep


def test_relax_matches_softmax_and_backward():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.dirichlet(np.ones(3), 5), rng.uniform(size=(5, 1)), rng.dirichlet(np.ones(2), 5)], axis=1)
    spans = [(0, 3), (4, 6)]
    gum = rng.gumbel(size=x.shape)
    y = relax_categoricals(x, spans, gum, 0.3)
    np.testing.assert_allclose(y, _relax_oracle(x, spans, gum, 0.3))
    np.testing.assert_array_equal(y[:, 3], x[:, 3])
    np.testing.assert_allclose(y[:, 0:3].sum(axis=1), 1.0)
    w = rng.normal(size=x.shape)
    analytic = relax_backward(x, y, spans, 0.3, w)
    numeric = diffnet.numeric_input_grad(lambda xx: float((relax_categoricals(xx, spans, gum, 0.3) * w).sum()), x)
    # near-saturated categories have gradients around 1e-11, below finite-difference round-off
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-9)


def test_config_validation_names_fields():
    with pytest.raises(ConfigError) as e:
        ReprogramConfig(gamma=-1.0, mode="BOGUS", epochs=0).validate()
    text = str(e.value)
    assert "gamma" in text and "mode" in text and "epochs" in text
    with pytest.raises(ConfigError, match="colour"):
        ReprogramConfig.from_dict({"colour": 1})
    assert ReprogramConfig.from_dict(ReprogramConfig().to_dict()) == ReprogramConfig()


def _short(mode, **kw):
    return ReprogramConfig(mode=mode, epochs=2, enc_hidden=(8, 8), disc_hidden=(8, 8), **kw)


def _train(world, cfg):
    g = build_generator(world["vae"], world["target"].schema, align(world["vae"].schema, world["target"].schema),
                        hidden=cfg.enc_hidden)
    return train_reprogram(g, world["clf"], world["t_tr"], world["t_va"], cfg, test=world["t_te"])


def test_training_keeps_frozen_parts_and_is_deterministic(world):
    clf_digest, vae_digest = world["clf"].digest(), world["vae"].digest()
    a = _train(world, _short("GAN", gumbel_tau=0.2, d_steps=2))
    b = _train(world, _short("GAN", gumbel_tau=0.2, d_steps=2))
    assert world["clf"].digest() == clf_digest and world["vae"].digest() == vae_digest
    assert a.generator.digest() == b.generator.digest()
    assert a.report.to_json() == b.report.to_json()
    assert a.report.details["selection"] in ("accuracy-realism", "realism-fallback")


def test_trained_fairgan_zero_delta_equals_gan(world):
    gan = _train(world, _short("GAN"))
    fair = _train(world, _short("FAIRGAN", delta=0.0))
    assert gan.generator.digest() == fair.generator.digest()
    assert fair.d2 is None
    assert gan.report.accuracy == fair.report.accuracy


def test_fairgan_reports_d2_and_probe(world):
    r = _train(world, _short("FAIRGAN", delta=1.0))
    assert r.d2 is not None and r.report.d2_accuracy is not None
    assert 0.0 <= r.report.fairness_probe <= 1.0
    assert r.report.details["selection"].startswith("fairness")


def test_classify_only_training_improves_over_init(world):
    cfg = ReprogramConfig(mode="CLASSIFY_ONLY", gamma=1.0, epochs=5, enc_hidden=(8, 8), lr=1e-2)
    g = build_generator(world["vae"], world["target"].schema, align(world["vae"].schema, world["target"].schema),
                        hidden=(8, 8))
    r = train_reprogram(g, world["clf"], world["t_tr"], world["t_va"], cfg)
    assert max(h.val_accuracy for h in r.history) == r.report.details["val_accuracy"]
    assert r.report.realism_pass is None


def test_generated_rows_follow_source_schema(world):
    g, _, _, _ = _setup(world)
    out = generate_cleaned(g, world["t_va"], world["clf"])
    assert out.schema == world["vae"].schema and len(out) == len(world["t_va"])
    assert generator_forward(g, g.inputs(world["t_va"])).shape == (len(world["t_va"]), world["vae"].width)


def test_checkpoint_roundtrip(world, tmp_path):
    g, d1, _, _ = _setup(world)
    save_generator(g, tmp_path / "g.json")
    back = load_generator(tmp_path / "g.json", world["vae"])
    assert back.digest() == g.digest()
    assert reprogrammed_accuracy(back, world["clf"], world["t_va"]) == reprogrammed_accuracy(g, world["clf"], world["t_va"])
    save_discriminator(d1, tmp_path / "d.json")
    assert load_discriminator(tmp_path / "d.json").params.digest() == d1.params.digest()
    other = dataclasses.replace(world["vae"], dec_params=_jitter(world["vae"].dec_params.copy(), 99))
    with pytest.raises(ValueError):
        load_generator(tmp_path / "g.json", other)


def test_generator_shape_contract(world):
    g, _, _, b = _setup(world)
    out = generator_forward(g, b.x)
    assert b.x.shape[1] == g.enc_config.layer_widths[0]
    assert out.shape == (len(b.x), g.output_width) and g.output_width == g.x_width + 1
    # protected bit is a probability, categorical groups are distributions
    assert np.all((out[:, g.x_width] >= 0) & (out[:, g.x_width] <= 1))


def test_fairness_discriminator_never_sees_generated_protected(world):
    g, _, d2, b = _setup(world)
    assert d2.config.layer_widths[0] == g.x_width < g.output_width
    d1 = _setup(world)[1]
    cfg = ReprogramConfig(mode="FAIRGAN", gamma=0.0, delta=1.0, l2=0.0)
    assert np.isfinite(combined_loss(g, d1, d2, world["clf"], b, cfg).terms["fairness"])
    d2_wide = make_discriminator(g.output_width, (8, 8), 2, "tanh")
    with pytest.raises(ValueError):
        combined_loss(g, d1, d2_wide, world["clf"], b, cfg)


def test_constant_generator_probe_is_majority_share(world):
    from fairgan_reprogram.reprogram import evaluate_fairness
    g, _, _, _ = _setup(world)
    g.enc_params.weights = [np.zeros_like(w) for w in g.enc_params.weights]
    data = world["t_tr"]
    share = max(data.protected.mean(), 1 - data.protected.mean())
    acc = evaluate_fairness(g, data, seed=0)
    assert abs(acc - share) <= 0.06, (acc, share)


def test_realism_slice_covers_only_shared_features(world):
    g, d1, _, _ = _setup(world)
    target, source = world["target"].schema, g.source_schema
    feats = {c.name for c in target.feature_columns} & {c.name for c in source.feature_columns}
    assert set(g.shared_columns) == feats
    assert set(g.shared_columns) < set(source.names)
    width = sum(source.column(n).cardinality if source.column(n).is_categorical else 1 for n in g.shared_columns)
    assert len(g.source_index) == len(g.target_index) == width == d1.config.layer_widths[0]
