import numpy as np
import pytest

from jfe import train as T
from jfe.errors import ConfigurationError, ContractViolation, NumericDomainError, TrainingDiverged
from jfe.losses import JfeWeights
from jfe.nets import EmbeddingModel, ModelConfig, classify, save_checkpoint
from jfe.train import (
    AdamState,
    TrainConfig,
    TrainingCorpus,
    adam_step,
    build_classification_batch,
    build_e2e_batch,
    clip_gradients,
    method_loss,
    read_loss_csv,
    train,
    write_loss_csv,
)


def toy_corpus(n_spk=4, n_chan=2, per_pair=6, T_=8, D=4, seed=0, noise=0.3):
    """Features = speaker mean + channel offset + noise; linearly separable by construction."""
    rng = np.random.default_rng(seed)
    mu = rng.normal(size=(n_spk, D)) * 2.0
    nu = rng.normal(size=(n_chan, D)) * 2.0
    feats, spk, chan = [], [], []
    for s in range(n_spk):
        for c in range(n_chan):
            for _ in range(per_pair):
                feats.append(mu[s] + nu[c] + noise * rng.normal(size=(T_, D)))
                spk.append(s)
                chan.append(c)
    return TrainingCorpus(feats, spk, chan, n_spk, n_chan)


def tiny_model(corpus, seed=0, **kw):
    cfg = dict(arch="dvector", input_dim=corpus.features[0].shape[1], n_speakers=corpus.n_speakers,
               n_nuisance=corpus.n_nuisance, lstm_cell=8, lstm_proj=6, attention_dim=4,
               classifier_hidden=(8,), seed=seed)
    cfg.update(kw)
    return EmbeddingModel(ModelConfig(**cfg))


# -- Adam ------------------------------------------------------------------------


def test_adam_first_step():
    cfg = TrainConfig(learning_rate=0.001)
    new, st = adam_step({"w": np.array(1.0)}, {"w": np.array(0.5)}, AdamState(), cfg)
    assert abs((new["w"] - 1.0) + 0.001) < 1e-8
    assert st.step == 1


def test_adam_zero_grad_is_noop():
    cfg = TrainConfig()
    p = {"w": np.array([1.0, -2.0])}
    new, _ = adam_step(p, {"w": np.zeros(2)}, AdamState(), cfg)
    assert np.array_equal(new["w"], p["w"])


def test_adam_three_steps_by_hand():
    cfg = TrainConfig(learning_rate=0.01)
    grads = [0.3, -1.2, 0.7]
    theta, m, v = 2.0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    p, st = {"w": np.array(2.0)}, AdamState()
    for g in grads:
        p, st = adam_step(p, {"w": np.array(g)}, st, cfg)
    assert abs(p["w"] - theta) < 1e-12


def test_adam_nonfinite_names_parameter():
    st = AdamState()
    with pytest.raises(NumericDomainError, match="bias"):
        adam_step({"w": np.ones(2), "bias": np.ones(1)}, {"w": np.ones(2), "bias": np.array([np.nan])}, st,
                  TrainConfig())
    assert st.step == 0 and not st.m


def test_adam_shape_mismatch():
    with pytest.raises(ContractViolation):
        adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, AdamState(), TrainConfig())


def test_clip_gradients():
    g = {"a": np.array([3.0, 4.0]), "b": None}
    out = clip_gradients(g, 1.0)
    np.testing.assert_allclose(out["a"], [0.6, 0.8])
    assert clip_gradients(g, 10.0)["a"] is g["a"]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(method="sgd")
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0)
    cfg = TrainConfig(iterations=11)
    assert cfg.grl_lambda(0) == 0.0 and cfg.grl_lambda(10) == 1.0 and abs(cfg.grl_lambda(5) - 0.5) < 1e-15


# -- batching ------------------------------------------------------------------------


def test_batch_determinism_and_segments():
    c = toy_corpus()
    cfg = TrainConfig(batch_size=5, segment_frames=8)
    a = build_classification_batch(c, cfg, np.random.default_rng(3))
    b = build_classification_batch(c, cfg, np.random.default_rng(3))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.index, b.index)
    # segment length equal to the utterance length: the only start is 0
    for row, i in enumerate(a.index):
        assert np.array_equal(a.x[row], c.features[i])


def test_batch_label_marginals():
    c = toy_corpus()
    c.speakers[:] = np.repeat([0, 1, 2, 3], [6, 6, 12, 24])
    cfg = TrainConfig(batch_size=10000)
    batch = build_classification_batch(c, cfg, np.random.default_rng(0))
    p = np.bincount(c.speakers, minlength=4) / len(c)
    counts = np.bincount(batch.speakers, minlength=4)
    sigma = np.sqrt(10000 * p * (1 - p))
    assert np.all(np.abs(counts - 10000 * p) <= 3 * sigma)


def test_short_utterances_skipped(caplog):
    c = toy_corpus()
    c.features[0] = c.features[0][:3]
    batch = build_classification_batch(c, TrainConfig(batch_size=200, segment_frames=5), np.random.default_rng(0))
    assert 0 not in batch.index
    assert "shorter" in caplog.text
    with pytest.raises(ConfigurationError):
        build_classification_batch(c, TrainConfig(batch_size=2, segment_frames=50), np.random.default_rng(0))


def test_variable_length_batch_masks():
    c = toy_corpus()
    c.features[1] = c.features[1][:5]
    batch = T._collate(c, [0, 1], None, np.random.default_rng(0))
    assert batch.x.shape == (2, 8, 4)
    assert batch.mask[1].sum() == 5 and batch.mask[0].all()


def test_e2e_batch():
    c = toy_corpus()
    b = build_e2e_batch(c, 2, 1, np.random.default_rng(0))
    assert b.x.shape[0] == 2
    b = build_e2e_batch(c, 3, 4, np.random.default_rng(1))
    pairs = list(b.index)
    assert len(set(pairs)) == len(pairs)
    spk = c.speakers[b.index].reshape(3, 4)
    assert np.all(spk == spk[:, :1]) and len(set(spk[:, 0])) == 3
    few = TrainingCorpus(c.features[:12], [0] * 12, [0] * 12, 1, 1)
    with pytest.raises(ConfigurationError):
        build_e2e_batch(few, 2, 1, np.random.default_rng(0))


# -- training procedures --------------------------------------------------------------


def _accuracy(model, corpus):
    pair = model.embed(np.stack(corpus.features))
    probs, _ = classify(model.spk_head, pair.speaker)
    return float(np.mean(probs.data.argmax(axis=1) == corpus.speakers))


def test_softmax_toy_accuracy():
    c = toy_corpus()
    model = tiny_model(c, n_pools=1)
    train("softmax", model, c, TrainConfig(method="softmax", iterations=200, learning_rate=0.01, batch_size=16))
    assert _accuracy(model, c) >= 0.95


def test_grl_lambda_zero_matches_no_reversal():
    c = toy_corpus()
    common = dict(iterations=15, learning_rate=0.01, batch_size=8, clip_norm=None, seed=4)
    soft = tiny_model(c)
    train("softmax", soft, c, TrainConfig(method="softmax", **common))
    grl = tiny_model(c)
    train("grl", grl, c, TrainConfig(method="grl", grl_lambda_start=0.0, grl_lambda_end=0.0, **common))
    for group in ("embedding", "speaker_head"):
        for k, p in soft.param_group(group).items():
            assert np.array_equal(p.data, grl.param_group(group)[k].data), k
    # the subtask head itself did learn
    fresh = tiny_model(c)
    assert not np.array_equal(grl.nuis_head.out_w.data, fresh.nuis_head.out_w.data)


def test_grl_gradient_reaches_embedding_reversed():
    c = toy_corpus()
    model = tiny_model(c)
    cfg = TrainConfig(method="grl")
    batch = build_classification_batch(c, TrainConfig(batch_size=6), np.random.default_rng(0))
    emb = {k: p for k, p in model.param_group("embedding").items() if not k.startswith("att_nuis.")}

    def grads(lam):
        for p in model.params().values():
            p.grad = None
        loss, _ = method_loss("grl", model, batch, cfg, lam)
        loss.backward()
        return {k: p.grad.copy() for k, p in emb.items()}

    g0, g1, g07 = grads(0.0), grads(1.0), grads(0.7)
    # branch contribution is linear in -lambda
    for k in emb:
        np.testing.assert_allclose(g07[k] - g0[k], 0.7 * (g1[k] - g0[k]), atol=1e-12)


class _Snap:
    def __init__(self, model):
        self.model = model
        self.calls = []

    def __call__(self, params, grads, state, cfg):
        before = {k: p.data.copy() for k, p in self.model.params().items()}
        out = _real_apply(params, grads, state, cfg)
        after = {k: p.data.copy() for k, p in self.model.params().items()}
        self.calls.append((sorted(params), before, after))
        return out


_real_apply = T._apply


def test_antiloss_alternation_freezes(monkeypatch):
    c = toy_corpus()
    model = tiny_model(c)
    snap = _Snap(model)
    monkeypatch.setattr(T, "_apply", snap)
    train("antiloss", model, c, TrainConfig(method="antiloss", iterations=3, batch_size=8, learning_rate=0.01))
    assert len(snap.calls) == 6
    emb = set(model.param_group("embedding"))
    nuis = set(model.param_group("nuisance_head"))
    for n, (names, before, after) in enumerate(snap.calls):
        step_a = n % 2 == 0
        assert set(names) == (nuis if step_a else emb | set(model.param_group("speaker_head")))
        frozen = emb if step_a else nuis
        for k in frozen:
            assert np.array_equal(before[k], after[k]), (n, k)


def test_jfe_single_step_is_adam_of_gradient():
    c = toy_corpus()
    cfg = TrainConfig(method="jfe", iterations=1, batch_size=6, clip_norm=None, learning_rate=0.01, seed=2)
    ref = tiny_model(c)
    ref.set_normalization(*c.frame_stats())
    batch = build_classification_batch(c, cfg, np.random.default_rng(2))
    loss, _ = method_loss("jfe", ref, batch, cfg)
    loss.backward()
    upd = {**ref.param_group("embedding"), **ref.param_group("speaker_head"), **ref.param_group("nuisance_head")}
    expected, _ = adam_step({k: p.data for k, p in upd.items()}, {k: p.grad for k, p in upd.items()},
                            AdamState(), cfg)
    model = tiny_model(c)
    train("jfe", model, c, cfg)
    for k, p in model.params().items():
        want = expected.get(k, ref.params()[k].data)
        assert np.array_equal(p.data, want), k


def test_jfe_toy_dynamics():
    c = toy_corpus(n_spk=4, n_chan=3, per_pair=4)
    model = tiny_model(c)
    res = train("jfe", model, c, TrainConfig(method="jfe", iterations=300, learning_rate=0.01, batch_size=16))
    tail = res.log[-20:]
    mean = {k: np.mean([r[k] for r in tail]) for k in T.COMPONENT_NAMES}
    assert mean["L_ss_ce"] < 0.5 and mean["L_cc_ce"] < 0.5
    assert mean["L_sc_e"] >= 0.8 * np.log(4)
    assert mean["L_cs_e"] >= 0.8 * np.log(3)


def test_e2e_training_runs_and_logs():
    c = toy_corpus()
    model = tiny_model(c, n_pools=1)
    res = train("e2e", model, c, TrainConfig(method="e2e", iterations=5, e2e_speakers=3, e2e_utterances=2))
    assert len(res.log) == 5 and np.isfinite(res.log[-1]["L_total"])
    assert np.isnan(res.log[-1]["L_ss_ce"])


def test_jfe_requires_two_pools():
    c = toy_corpus()
    with pytest.raises(ConfigurationError):
        train("jfe", tiny_model(c, n_pools=1), c, TrainConfig(method="jfe", iterations=1))


def test_reproducible_checkpoint(tmp_path):
    c = toy_corpus()
    blobs = []
    for n in range(2):
        model = tiny_model(c)
        train("jfe", model, c, TrainConfig(method="jfe", iterations=10, batch_size=8, seed=7))
        save_checkpoint(tmp_path / f"{n}.jfem", model)
        blobs.append((tmp_path / f"{n}.jfem").read_bytes())
    assert blobs[0] == blobs[1]


def test_divergence_restores_last_good(tmp_path):
    c = toy_corpus()
    c.features[5] = np.full_like(c.features[5], np.nan)
    model = tiny_model(c, n_pools=1)
    start = {k: p.data.copy() for k, p in model.params().items()}
    cfg = TrainConfig(method="softmax", iterations=50, batch_size=48, normalize_inputs=False, out_dir=str(tmp_path))
    with pytest.raises(TrainingDiverged) as info:
        train("softmax", model, c, cfg)
    assert info.value.iteration == 0 and info.value.checkpoint.endswith("last_good.jfem")
    for k, p in model.params().items():
        assert np.array_equal(p.data, start[k])


def test_periodic_checkpoints(tmp_path):
    c = toy_corpus()
    cfg = TrainConfig(method="softmax", iterations=6, batch_size=4, checkpoint_interval=3, out_dir=str(tmp_path))
    res = train("softmax", tiny_model(c, n_pools=1), c, cfg)
    assert [p.split("/")[-1] for p in res.checkpoints] == ["ckpt_000003.jfem", "ckpt_000006.jfem"]


def test_loss_csv_roundtrip(tmp_path):
    c = toy_corpus()
    res = train("jfe", tiny_model(c), c, TrainConfig(method="jfe", iterations=3, batch_size=4),
                log_path=tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "iter,L_ss_ce,L_cc_ce,L_sc_e,L_cs_e,L_nmapc,L_total"
    back = read_loss_csv(tmp_path / "loss.csv")
    assert back == res.log
    write_loss_csv(tmp_path / "again.csv", back)
    assert (tmp_path / "again.csv").read_bytes() == (tmp_path / "loss.csv").read_bytes()


def test_multitask_weights_drop_adversarial_terms():
    c = toy_corpus()
    model = tiny_model(c)
    batch = build_classification_batch(c, TrainConfig(batch_size=6), np.random.default_rng(0))
    loss, parts = method_loss("jfe", model, batch, TrainConfig(method="jfe", weights=JfeWeights(1, 1, 0, 0, 0)))
    assert abs(loss.item() - (parts["L_ss_ce"] + parts["L_cc_ce"])) < 1e-12
