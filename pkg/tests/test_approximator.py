import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sentattn import autograd as ag
from sentattn.approximator import (
    ApproxConfig,
    ApproximatorParams,
    additive_form_mass,
    approx_saliency,
    encode_sentences,
    gru,
    model_free_features,
    model_free_rank,
    model_free_scores,
    model_free_select,
    phi,
    product_form_mass,
)
from sentattn.attention import AttentionConfig, OpCounter, head_average, sentence_saliency, top_r_select
from sentattn.autograd import Tensor
from sentattn.corpus import SentencePartition

from conftest import make_tiny_model


def _params(D=8, H=2, Ds=6, gru_layers=2, dec_layers=2, seed=0):
    cfg = ApproxConfig(D=D, H=H, Ds=Ds, gru_layers=gru_layers, dec_layers=dec_layers)
    return ApproximatorParams(cfg, np.random.default_rng(seed))


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


# --- sentence encoder ------------------------------------------------------

def test_single_token_sentences_shape():
    p = _params()
    part = SentencePartition((1, 1, 1, 1))
    Y = encode_sentences(np.random.default_rng(1).normal(size=(4, 8)), part, p)
    assert Y.shape == (4, 8)
    assert np.isfinite(Y).all()


def test_single_token_sentence_depends_only_on_its_token():
    p = _params()
    part = SentencePartition((1, 1, 1))
    X = np.random.default_rng(2).normal(size=(3, 8))
    Y = encode_sentences(X, part, p)
    # the same token alone gives the same y regardless of neighbours
    for i in range(3):
        Yi = encode_sentences(X[i:i + 1], SentencePartition((1,)), p)
        np.testing.assert_allclose(Y[i], Yi[0], atol=1e-13)


def test_locality_perturbation():
    p = _params()
    part = SentencePartition((3, 2, 4))
    rng = np.random.default_rng(3)
    X = rng.normal(size=(9, 8))
    Y = encode_sentences(X, part, p)
    X2 = X.copy()
    X2[3:5] = rng.normal(size=(2, 8))      # sentence 1 only
    Y2 = encode_sentences(X2, part, p)
    np.testing.assert_array_equal(Y[0], Y2[0])
    np.testing.assert_array_equal(Y[2], Y2[2])
    assert not np.allclose(Y[1], Y2[1])


def test_sentence_order_inside_doc_does_not_matter():
    p = _params()
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
    Y1 = encode_sentences(np.vstack([a, b]), SentencePartition((3, 5)), p)
    Y2 = encode_sentences(np.vstack([b, a]), SentencePartition((5, 3)), p)
    np.testing.assert_allclose(Y1[0], Y2[1], atol=1e-13)
    np.testing.assert_allclose(Y1[1], Y2[0], atol=1e-13)


def test_partition_mismatch_raises():
    with pytest.raises(ValueError):
        encode_sentences(np.zeros((5, 8)), SentencePartition((2, 2)), _params())


def test_gru_two_steps_match_gate_algebra():
    rng = np.random.default_rng(5)
    w_ih, w_hh = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
    b_ih, b_hh = rng.normal(size=6), rng.normal(size=6)
    x = rng.normal(size=(1, 2, 2))
    hs = gru(Tensor(x), np.ones((1, 2), bool), Tensor(w_ih), Tensor(w_hh), Tensor(b_ih), Tensor(b_hh)).data[0]

    h = [0.0, 0.0]
    for t in range(2):
        new = []
        for u in range(2):
            def pre(gate, u=u):
                col = 2 * gate + u
                gi = sum(x[0, t, k] * w_ih[k, col] for k in range(2)) + b_ih[col]
                gh = sum(h[k] * w_hh[k, col] for k in range(2)) + b_hh[col]
                return gi, gh
            gi_r, gh_r = pre(0)
            gi_z, gh_z = pre(1)
            gi_n, gh_n = pre(2)
            r = _sigmoid(gi_r + gh_r)
            z = _sigmoid(gi_z + gh_z)
            n = math.tanh(gi_n + r * gh_n)
            new.append((1 - z) * n + z * h[u])
        h = new
        np.testing.assert_allclose(hs[t], h, rtol=0, atol=1e-12)


def test_gru_padding_carries_state():
    rng = np.random.default_rng(6)
    w_ih, w_hh = Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(2, 6)))
    b_ih, b_hh = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
    x = rng.normal(size=(1, 4, 3))
    hs = gru(Tensor(x), np.array([[True, True, False, False]]), w_ih, w_hh, b_ih, b_hh).data[0]
    np.testing.assert_array_equal(hs[1], hs[3])


def test_parameter_count_matches_closed_form():
    for D, Ds, L, dec in [(8, 6, 2, 2), (64, 64, 2, 2), (4, 3, 1, 3)]:
        cfg = ApproxConfig(D=D, H=1, Ds=Ds, gru_layers=L, dec_layers=dec)
        p = ApproximatorParams(cfg, np.random.default_rng(0))
        assert p.count() == ApproximatorParams.expected_count(cfg)


def test_encoder_receives_no_base_gradient():
    p = _params()
    enc = Tensor(np.random.default_rng(7).normal(size=(4, 8)), requires_grad=True)
    from sentattn.approximator import encode_sentences_batch
    y, _ = encode_sentences_batch(enc.data[None], [SentencePartition((2, 2))], p)
    g = ag.grad(y.sum(), [enc, p["approx.proj.w"]])
    np.testing.assert_array_equal(g[0], 0.0)
    assert np.abs(g[1]).sum() > 0


# --- model-based saliency --------------------------------------------------

def test_identical_sentences_give_uniform():
    p = _params()
    cfg = AttentionConfig(8, 2)
    Y = np.tile(np.random.default_rng(8).normal(size=8), (5, 1))
    a = approx_saliency(np.random.default_rng(9).normal(size=(3, 8)), Y, p, 0, cfg).data
    np.testing.assert_allclose(a, 0.2, atol=1e-15)


def test_single_sentence_is_one():
    p = _params()
    a = approx_saliency(np.ones((2, 8)), np.ones((1, 8)), p, 1, AttentionConfig(8, 2)).data
    np.testing.assert_array_equal(a, 1.0)


def test_saliency_matches_loop_oracle():
    p = _params(seed=3)
    cfg = AttentionConfig(8, 2)
    rng = np.random.default_rng(10)
    q, Y = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
    a = approx_saliency(q, Y, p, 1, cfg).data
    Wq, Wk = p["approx.wq.1"].data, p["approx.wk.1"].data
    dh = 4
    for m in range(3):
        qm = [sum(q[m, k] * Wq[k, c] for k in range(8)) for c in range(8)]
        for h in range(2):
            logits = []
            for i in range(5):
                ki = [sum(Y[i, k] * Wk[k, c] for k in range(8)) for c in range(8)]
                logits.append(sum(qm[h * dh + d] * ki[h * dh + d] for d in range(dh)) / math.sqrt(dh))
            mx = max(logits)
            e = [math.exp(v - mx) for v in logits]
            np.testing.assert_allclose(a[h, m], [v / sum(e) for v in e], rtol=0, atol=1e-10)


@given(st.integers(1, 7), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_saliency_rows_are_distributions(n1, M, seed):
    p = _params(seed=seed % 5)
    rng = np.random.default_rng(seed)
    a = approx_saliency(rng.normal(size=(M, 8)) * 3, rng.normal(size=(n1, 8)) * 3, p, 0,
                        AttentionConfig(8, 2)).data
    assert (a >= 0).all()
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)


def test_padded_sentences_get_zero():
    p = _params()
    Y = np.random.default_rng(11).normal(size=(1, 4, 8))
    valid = np.array([[True, True, True, False]])
    a = approx_saliency(np.ones((1, 2, 8)), Y, p, 0, AttentionConfig(8, 2), sentence_valid=valid).data
    np.testing.assert_array_equal(a[..., 3], 0.0)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)


def test_query_input_is_detached():
    p = _params()
    q = Tensor(np.ones((2, 8)), requires_grad=True)
    a = approx_saliency(q, np.random.default_rng(12).normal(size=(3, 8)), p, 0, AttentionConfig(8, 2))
    g = ag.grad((a * np.arange(3.0)).sum(), [q, p["approx.wq.0"]])
    np.testing.assert_array_equal(g[0], 0.0)
    assert np.abs(g[1]).sum() > 0


def test_attached_projections_copy_word_level_and_own_storage():
    model = make_tiny_model(20, seed=0, approx=True)
    for l in range(model.cfg.dec_layers):
        for w in ("wq", "wk"):
            src = model.params[f"dec.{l}.cross.{w}"].data
            dst = model.approx[f"approx.{w}.{l}"].data
            np.testing.assert_array_equal(src, dst)
            assert not np.shares_memory(src, dst)


def test_initial_state_reproduces_word_saliency_for_single_token_sentences():
    # with J_i = 1 and y_i set to the token state, copied projections give the exact saliency
    model = make_tiny_model(20, seed=1, approx=True)
    cfg = model.cfg.attn
    rng = np.random.default_rng(13)
    enc, q_in = rng.normal(size=(5, cfg.D)), rng.normal(size=(3, cfg.D))
    Wq, Wk = model.params["dec.0.cross.wq"].data, model.params["dec.0.cross.wk"].data
    ideal = sentence_saliency(q_in @ Wq, enc @ Wk, SentencePartition((1,) * 5), cfg)
    approx = approx_saliency(q_in, enc, model.approx, 0, cfg).data
    np.testing.assert_allclose(approx, ideal.transpose(1, 0, 2), atol=1e-12)


def test_mac_audit_model_based():
    p = _params(D=8, H=2)
    c = OpCounter()
    approx_saliency(np.ones((3, 8)), np.ones((5, 8)), p, 0, AttentionConfig(8, 2), counter=c)
    assert c.counts["sentence_proj"] == 3 * 8 * 8
    assert c.counts["sentence_score"] == 3 * 5 * 8
    assert c.counts["sentence_softmax"] == 3 * 5 * 2


def test_mac_audit_encoder_side():
    p = _params(D=8, Ds=6, gru_layers=2)
    c = OpCounter()
    part = SentencePartition((3, 2))
    encode_sentences(np.ones((5, 8)), part, p, counter=c)
    expected = 2 * 5 * 3 * 6 * (8 + 6) + 2 * 5 * 3 * 6 * (12 + 6) + 2 * 2 * 6 * 8
    assert c.counts["encoder_side"] == expected


# --- model-free ------------------------------------------------------------

def test_phi_positivity():
    x = np.linspace(-30, 30, 601)
    assert (phi(x, "elu_plus_one") > 0).all()
    assert (phi(x, "relu") >= 0).all()
    assert (phi(x, "exp") > 0).all()
    np.testing.assert_allclose(phi(np.array([-1.0, 0.5]), "elu_plus_one"), [math.exp(-1), 1.5])


def test_phi_unknown_name():
    with pytest.raises(ValueError):
        phi(np.ones(2), "softplus")


def test_relu_negative_keys_give_zero_features():
    k = -np.abs(np.random.default_rng(14).normal(size=(2, 6, 3))) - 0.1
    F = model_free_features(k, SentencePartition((2, 4)), "relu")
    np.testing.assert_array_equal(F, 0.0)


def test_single_token_features_are_phi_of_key():
    k = np.random.default_rng(15).normal(size=(2, 3, 4))
    F = model_free_features(k, SentencePartition((1, 1, 1)), "elu_plus_one")
    np.testing.assert_allclose(F, phi(k, "elu_plus_one"), atol=0)


@pytest.mark.parametrize("name", ["elu_plus_one", "relu", "exp"])
def test_features_match_elementwise_oracle(name):
    rng = np.random.default_rng(16)
    part = SentencePartition((3, 1, 4, 2))
    k = rng.normal(size=(2, part.n_tokens, 3))
    F = model_free_features(k, part, name)
    f = {"elu_plus_one": lambda v: v + 1 if v > 0 else math.exp(v),
         "relu": lambda v: max(v, 0.0), "exp": math.exp}[name]
    off = part.offsets
    for h in range(2):
        for i in range(part.n_sentences):
            for d in range(3):
                want = sum(f(k[h, j, d]) for j in range(off[i], off[i + 1]))
                assert abs(F[h, i, d] - want) <= 1e-12


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.lists(st.integers(1, 4), min_size=1, max_size=4),
       st.integers(0, 1000))
def test_features_concatenation_linearity(la, lb, seed):
    rng = np.random.default_rng(seed)
    pa, pb = SentencePartition(tuple(la)), SentencePartition(tuple(lb))
    ka, kb = rng.normal(size=(2, pa.n_tokens, 3)), rng.normal(size=(2, pb.n_tokens, 3))
    whole = model_free_features(np.concatenate([ka, kb], axis=1), SentencePartition(tuple(la + lb)), "exp")
    parts = np.concatenate([model_free_features(ka, pa, "exp"), model_free_features(kb, pb, "exp")], axis=1)
    np.testing.assert_allclose(whole, parts, rtol=1e-14, atol=0)


def test_feature_partition_mismatch():
    with pytest.raises(ValueError):
        model_free_features(np.ones((1, 4, 2)), SentencePartition((2, 3)), "relu")


def test_one_dimensional_collapse_exact():
    rng = np.random.default_rng(17)
    for _ in range(50):
        q = rng.normal(size=1)
        k = rng.normal(size=(rng.integers(1, 6), 1))
        assert abs(product_form_mass(q, k) - additive_form_mass(q, k)) <= 1e-12


def test_product_and_additive_differ_in_higher_dims():
    q = np.array([1.0, 1.0])
    k = np.array([[1.0, 1.0]])
    assert product_form_mass(q, k) != additive_form_mass(q, k)


def test_identical_sentences_tie_to_lowest_indices():
    k = np.tile(np.random.default_rng(18).normal(size=(2, 1, 3)), (1, 5, 1))
    F = model_free_features(k, SentencePartition((1,) * 5), "elu_plus_one")
    q = np.random.default_rng(19).normal(size=(2, 3))
    s = model_free_scores(q, F, "elu_plus_one")
    assert np.ptp(s, axis=-1).max() == 0.0
    np.testing.assert_array_equal(model_free_select(q, F, "elu_plus_one", 3), [0, 1, 2])


def test_rank_normalises_heads_before_averaging():
    s = np.array([[1.0, 3.0], [100.0, 0.0]])
    np.testing.assert_allclose(model_free_rank(s), [0.625, 0.375])
    np.testing.assert_allclose(model_free_rank(np.zeros((2, 4))), 0.25)


def test_model_free_mac_audit():
    F = np.ones((2, 6, 4))
    c = OpCounter()
    model_free_scores(np.ones((2, 4)), F, "exp", counter=c)
    assert c.counts["sentence_score"] == 6 * 2 * 4


def test_model_free_overlap_with_ideal_is_measurable():
    rng = np.random.default_rng(20)
    cfg = AttentionConfig(8, 2)
    part = SentencePartition((3, 2, 4, 1, 3, 2))
    K, q = rng.normal(size=(part.n_tokens, 8)), rng.normal(size=8)
    ideal = top_r_select(head_average(sentence_saliency(q, K, part, cfg)), 3)
    from sentattn.approximator import to_heads
    F = model_free_features(to_heads(K, 2), part, "exp")
    free = model_free_select(to_heads(q[None], 2)[:, 0] * cfg.scale, F, "exp", 3)
    overlap = len(set(ideal) & set(free)) / 3
    assert 0.0 <= overlap <= 1.0
    assert len(free) == 3
