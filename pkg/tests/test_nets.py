import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jfe import tensor as tn
from jfe.errors import ContractViolation
from jfe.losses import one_hot, speaker_ce
from jfe.nets import (
    AttentionHead,
    ClassifierHead,
    EmbeddingModel,
    LstmProjParams,
    ModelConfig,
    TdnnParams,
    attention_pool,
    classify,
    dual_attention_pool,
    grl_node,
    load_checkpoint,
    lstm_forward,
    read_checkpoint,
    save_checkpoint,
    splice_indices,
    tdnn_forward,
)
from jfe.tensor import Tensor, grad_check_params


def _sig(z):
    return 1 / (1 + np.exp(-z))


# -- LSTM ----------------------------------------------------------------------


def test_lstm_zero_params_zero_output():
    p = LstmProjParams(5, 6, 3, np.random.default_rng(0))
    for t in p._params.values():
        t.data[...] = 0
    out = lstm_forward(p, np.random.default_rng(1).normal(size=(7, 5)))
    assert out.shape == (7, 3) and np.all(out.data == 0)


def test_lstm_single_step_by_hand():
    rng = np.random.default_rng(2)
    p = LstmProjParams(4, 3, 2, rng)
    x = rng.normal(size=(1, 4))
    q = {k: v.data for k, v in p._params.items()}
    z = x[0] @ q["wx"] + q["b"]
    H = 3
    i, f, g, o = _sig(z[:H]), _sig(z[H : 2 * H]), np.tanh(z[2 * H : 3 * H]), _sig(z[3 * H :])
    c = i * g
    h = (o * np.tanh(c)) @ q["wp"]
    np.testing.assert_allclose(lstm_forward(p, x).data[0], h, atol=1e-14)


@pytest.mark.parametrize("T", [1, 2, 9])
def test_lstm_shape(T):
    p = LstmProjParams(4, 6, 5, np.random.default_rng(0))
    assert lstm_forward(p, np.zeros((T, 4))).shape == (T, 5)
    assert lstm_forward(p, np.zeros((3, T, 4))).shape == (3, T, 5)


def test_lstm_dimension_mismatch():
    p = LstmProjParams(4, 6, 5, np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        lstm_forward(p, np.zeros((3, 5)))


def test_fused_lstm_matches_unfused():
    rng = np.random.default_rng(4)
    p = LstmProjParams(5, 4, 3, rng)
    x = Tensor(rng.normal(size=(2, 6, 5)), requires_grad=True)
    w = rng.normal(size=(2, 6, 3))
    grads = []
    for fused in (True, False):
        x.grad = None
        for t in p._params.values():
            t.grad = None
        out = lstm_forward(p, x, fused=fused)
        (out * w).sum().backward()
        grads.append((out.data, x.grad.copy(), {k: v.grad.copy() for k, v in p._params.items()}))
    np.testing.assert_allclose(grads[0][0], grads[1][0], atol=1e-12)
    np.testing.assert_allclose(grads[0][1], grads[1][1], atol=1e-12)
    for k in grads[0][2]:
        np.testing.assert_allclose(grads[0][2][k], grads[1][2][k], atol=1e-12)


# -- TDNN ----------------------------------------------------------------------


def test_tdnn_identity_context_zero():
    p = TdnnParams(3, (3,), np.random.default_rng(0), contexts=((0,),))
    p.layers[0].w.data = np.eye(3)
    x = np.random.default_rng(1).normal(size=(5, 3))
    np.testing.assert_allclose(tdnn_forward(p, x).data, np.maximum(x, 0))


def test_tdnn_constant_in_time():
    p = TdnnParams(3, (4, 4, 4, 4, 4), np.random.default_rng(0))
    x = np.tile(np.random.default_rng(1).normal(size=3), (9, 1))
    out = tdnn_forward(p, x).data
    np.testing.assert_allclose(out, np.tile(out[:1], (9, 1)), atol=1e-14)


def _tdnn_oracle(p, x):
    h = x
    for layer in p.layers:
        T = h.shape[0]
        rows = []
        for t in range(T):
            parts = [h[min(max(t + o, 0), T - 1)] for o in layer.offsets]
            rows.append(np.maximum(np.concatenate(parts) @ layer.w.data + layer.b.data, 0))
        h = np.array(rows)
    return h


def test_tdnn_matches_splice_oracle():
    rng = np.random.default_rng(6)
    p = TdnnParams(4, (5, 5, 5, 5, 3), rng)
    for layer in p.layers:
        layer.b.data = rng.normal(size=layer.b.shape) * 0.1
    x = rng.normal(size=(7, 4))
    np.testing.assert_allclose(tdnn_forward(p, x).data, _tdnn_oracle(p, x), atol=1e-12)


def test_tdnn_interior_frames_equal_unpadded():
    rng = np.random.default_rng(8)
    p = TdnnParams(3, (4, 4, 4, 4, 4), rng)
    x = rng.normal(size=(30, 3))
    full = tdnn_forward(p, x).data
    reach = 2 + 2 + 3  # total one-sided context of the stack
    # dropping frames far from t leaves an interior output unchanged
    sub = tdnn_forward(p, x[10 - reach : 10 + reach + 1]).data
    np.testing.assert_allclose(sub[reach], full[10], atol=1e-12)


def test_splice_indices_clamped():
    np.testing.assert_array_equal(splice_indices(3, (-2, 0, 2)), [[0, 0, 2], [0, 1, 2], [0, 2, 2]])


def test_tdnn_dimension_mismatch():
    p = TdnnParams(3, (4, 4, 4, 4, 4), np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        tdnn_forward(p, np.zeros((5, 4)))


# -- attention -----------------------------------------------------------------


def _head(P=3, A=4, seed=0):
    return AttentionHead(P, A, np.random.default_rng(seed))


def test_attention_equal_scores_gives_mean():
    head = _head()
    head._params["v"].data[...] = 0
    h = np.random.default_rng(1).normal(size=(5, 3))
    omega, alpha = attention_pool(head, h)
    np.testing.assert_allclose(omega.data, h.mean(axis=0), atol=1e-14)
    np.testing.assert_allclose(alpha.data, 0.2)


def test_attention_single_frame():
    h = np.random.default_rng(1).normal(size=(1, 3))
    omega, alpha = attention_pool(_head(), h)
    np.testing.assert_allclose(omega.data, h[0], atol=1e-15)
    np.testing.assert_array_equal(alpha.data, [1.0])


def test_attention_saturation():
    head = AttentionHead(1, 1, np.random.default_rng(0))
    head._params["W"].data = np.array([[1.0]])
    head._params["v"].data = np.array([[20.0 / np.tanh(1.0)]])
    h = np.array([[1.0], [0.0]])
    omega, alpha = attention_pool(head, h)
    np.testing.assert_allclose(alpha.data, [1 / (1 + np.exp(-20)), np.exp(-20) / (1 + np.exp(-20))], rtol=1e-12)
    assert abs(alpha.data[1] - 2e-9) < 1e-10
    np.testing.assert_allclose(omega.data, h[0], atol=1e-8)


def test_attention_shift_invariance():
    rng = np.random.default_rng(2)
    head = _head()
    h = rng.normal(size=(6, 3))
    _, a = attention_pool(head, h)
    e = head.scores(Tensor(h)).data
    np.testing.assert_allclose(tn.softmax(e + 7.5).data, a.data, atol=1e-14)


def test_attention_mask_ignores_padding():
    rng = np.random.default_rng(3)
    head = _head()
    h = rng.normal(size=(1, 6, 3))
    mask = np.array([[1, 1, 1, 1, 0, 0]], dtype=bool)
    om, al = attention_pool(head, h, mask)
    om4, _ = attention_pool(head, h[:, :4])
    np.testing.assert_allclose(om.data, om4.data, atol=1e-12)
    assert np.all(al.data[0, 4:] == 0)


def test_dual_pool_identical_heads():
    a, b = _head(seed=5), _head(seed=5)
    h = np.random.default_rng(1).normal(size=(5, 3))
    pair = dual_attention_pool(a, b, h)
    np.testing.assert_array_equal(pair.speaker.data, pair.nuisance.data)


def test_dual_pool_disjoint_frames():
    h = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 0]])
    a = AttentionHead(3, 1, np.random.default_rng(0))
    b = AttentionHead(3, 1, np.random.default_rng(0))
    for head, k in ((a, 0), (b, 1)):
        head._params["W"].data = np.eye(3)[:, [k]]
        head._params["v"].data = np.array([[60.0]])
    pair = dual_attention_pool(a, b, h)
    np.testing.assert_allclose(pair.speaker.data, h[0], atol=1e-12)
    np.testing.assert_allclose(pair.nuisance.data, h[1], atol=1e-12)
    assert abs(pair.alpha_speaker.data.sum() - 1) < 1e-12
    assert abs(pair.alpha_nuisance.data.sum() - 1) < 1e-12


# -- GRL -----------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 3.0))
def test_grl_scales_gradient(seed, lam):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(3, 4))
    W = rng.normal(size=(4, 2))

    def f(t):
        return tn.tanh(t @ W).sum()

    x1 = Tensor(v, requires_grad=True)
    f(x1).backward()
    x2 = Tensor(v, requires_grad=True)
    out = grl_node(x2, lam)
    np.testing.assert_array_equal(out.data, v)
    f(out).backward()
    np.testing.assert_allclose(x2.grad, -lam * x1.grad, atol=1e-14)


def test_grl_negative_scale_rejected():
    with pytest.raises(ContractViolation):
        grl_node(Tensor([1.0]), -0.5)


# -- classifier ----------------------------------------------------------------


def test_classifier_zero_weights_uniform():
    head = ClassifierHead(4, (3,), 5, np.random.default_rng(0))
    for t in head._params.values():
        t.data[...] = 0
    probs, hidden = classify(head, np.ones(4))
    np.testing.assert_allclose(probs.data, 0.2)
    assert hidden.shape == (3,)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_classifier_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    head = ClassifierHead(4, (6,), 7, rng, "leaky_relu")
    probs, _ = classify(head, rng.normal(size=(5, 4)) * 10)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)


def test_classifier_saturation():
    head = ClassifierHead(2, (), 3, np.random.default_rng(0))
    head.out_w.data[...] = 0
    head.out_b.data = np.array([0.0, 60.0, 0.0])
    probs, _ = classify(head, np.ones(2))
    assert probs.data[1] > 1 - 1e-12


def test_classifier_dimension_mismatch():
    head = ClassifierHead(4, (3,), 2, np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        classify(head, np.ones(5))


# -- end-to-end differentiability -------------------------------------------------------


@pytest.mark.parametrize("arch", ["dvector", "xvector"])
def test_loss_through_model_grad_check(arch):
    cfg = ModelConfig(arch=arch, input_dim=3, n_speakers=3, n_nuisance=2, lstm_cell=4, lstm_proj=3,
                      tdnn_widths=(4, 4, 4, 4, 4), embed_dim=5, attention_dim=3, classifier_hidden=(4,), seed=1,
                      activation="leaky_relu")
    model = EmbeddingModel(cfg)
    rng = np.random.default_rng(0)
    # zero biases put dead rectifier units exactly on their kink; move them off it
    for name, p in model.params().items():
        if name.endswith(".b"):
            p.data = p.data + rng.uniform(0.2, 0.5, size=p.shape) * rng.choice([-1, 1], size=p.shape)
    x = rng.normal(size=(2, 6, 3))
    y = one_hot([0, 2], 3)

    def f():
        pair = model.embed(x)
        ps, _ = classify(model.spk_head, pair.speaker)
        pn, _ = classify(model.nuis_head, pair.nuisance)
        return speaker_ce(ps, y) + speaker_ce(pn, one_hot([1, 0], 2))

    rep = grad_check_params(f, model.params(), max_per_param=10, rng=rng)
    assert rep.max_rel_error <= 1e-4, rep


def test_embedding_dims():
    d = EmbeddingModel(ModelConfig(arch="dvector", input_dim=60, lstm_cell=8, lstm_proj=6))
    pair = d.embed(np.zeros((1, 7, 60)))
    assert pair.speaker.shape == (1, 6) and pair.nuisance.shape == (1, 6)
    x = EmbeddingModel(ModelConfig(arch="xvector", input_dim=30, tdnn_widths=(4,) * 5, embed_dim=9, n_pools=1))
    pair = x.embed(np.zeros((1, 7, 30)))
    assert pair.speaker.shape == (1, 9) and pair.nuisance is None
    assert np.all(pair.speaker.data >= 0)


# -- checkpoints ---------------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = ModelConfig(arch="dvector", input_dim=4, n_speakers=3, lstm_cell=5, lstm_proj=3, attention_dim=2,
                      classifier_hidden=(4,), seed=3)
    m = EmbeddingModel(cfg)
    m.set_normalization(np.arange(4.0), np.full(4, 2.0))
    save_checkpoint(tmp_path / "m.jfem", m)
    assert (tmp_path / "m.jfem").read_bytes()[:4] == b"JFEM"
    m2 = load_checkpoint(tmp_path / "m.jfem")
    assert m2.config == cfg
    for (k, a), (k2, b) in zip(m.params().items(), m2.params().items()):
        assert k == k2 and a.data.tobytes() == b.data.tobytes()
    assert np.array_equal(m2.norm_mean, m.norm_mean)
    save_checkpoint(tmp_path / "m2.jfem", m2)
    assert (tmp_path / "m.jfem").read_bytes() == (tmp_path / "m2.jfem").read_bytes()
    _, blocks = read_checkpoint(tmp_path / "m.jfem")
    assert "frame.wx" in blocks and "e2e.log_a" in blocks


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ContractViolation):
        read_checkpoint(tmp_path / "x")
