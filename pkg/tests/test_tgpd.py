from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcsdistill import diffcore as dc
from tcsdistill.diffcore import ShapeError, Tape, Tensor, grad_check
from tcsdistill.nets import ParamStore
from tcsdistill.tgpd import (
    TokenState,
    init_projection,
    init_tgpd,
    pair_terms,
    tgpd_pair_loss,
    tgpd_total,
    tokenize,
)


def _state(logits: np.ndarray, seq: np.ndarray | None = None) -> TokenState:
    logits = np.asarray(logits, dtype=np.float64)
    B, L, _ = logits.shape
    seq = np.zeros((B, L, 2)) if seq is None else seq
    return TokenState(Tensor(seq[:, 1:]), Tensor(seq[:, :1]), Tensor(seq), Tensor(logits),
                      dc.softmax_rows(Tensor(logits)))


def _feat(rng, B=2, C=16, H=8, W=16):
    return Tensor(rng.normal(size=(B, C, H, W)))


def test_shapes_8x16_patch4():
    store = init_projection(16, 4, 32, seed=0)
    tok = tokenize(_feat(np.random.default_rng(0)), store, 4)
    assert tok.patches.shape == (2, 8, 32)
    assert tok.glob.shape == (2, 1, 32)
    assert tok.seq.shape == (2, 9, 32) and tok.length == 9
    assert tok.attn.shape == (2, 9, 9)
    np.testing.assert_allclose(tok.attn.data.sum(-1), 1.0, atol=1e-9)


def test_constant_feature_gives_uniform_attention():
    store = init_projection(4, 2, 8, seed=1)
    for t in store:
        if t.ndim == 1:
            t.data[...] = 0.0
    tok = tokenize(Tensor(np.full((1, 4, 4, 6), 0.7)), store, 2)
    p = tok.patches.data[0]
    assert np.allclose(p, p[0])
    # the global token differs from patch tokens, so zero the query to test the symmetric case
    store["wq"].data[...] = 0.0
    tok = tokenize(Tensor(np.full((1, 4, 4, 6), 0.7)), store, 2)
    np.testing.assert_allclose(tok.attn.data, 1.0 / 7, atol=1e-15)


def test_attention_matches_naive_loops():
    rng = np.random.default_rng(2)
    store = init_projection(3, 2, 5, seed=3)
    x = rng.normal(size=(2, 3, 4, 4))
    tok = tokenize(Tensor(x), store, 2)
    W = {k: t.data for k, t in store.items()}
    for b in range(2):
        seq = [(x[b].mean(axis=(1, 2)) @ W["token.w"]) + W["token.b"]]
        for i in range(2):
            for j in range(2):
                vec = x[b, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].reshape(-1)
                seq.append(vec @ W["patch.w"] + W["patch.b"])
        seq = np.array(seq)
        L = len(seq)
        for r in range(L):
            q = sum(seq[r, d] * W["wq"][d] for d in range(5))
            logits = []
            for c in range(L):
                k = sum(seq[c, d] * W["wk"][d] for d in range(5))
                logits.append(sum(q[e] * k[e] for e in range(5)) / math.sqrt(5))
            m = max(logits)
            ex = [math.exp(v - m) for v in logits]
            for c in range(L):
                assert abs(tok.attn.data[b, r, c] - ex[c] / sum(ex)) < 1e-12
        np.testing.assert_allclose(tok.seq.data[b], seq, rtol=0, atol=1e-12)


def test_indivisible_dims_rejected():
    store = init_projection(16, 4, 32, seed=0)
    with pytest.raises(ShapeError):
        tokenize(Tensor(np.zeros((1, 16, 6, 16))), store, 4)
    with pytest.raises(ShapeError):
        tokenize(Tensor(np.zeros((1, 8, 8, 16))), store, 4)


def test_identity_pair_loss_is_exactly_zero():
    rng = np.random.default_rng(0)
    tok = tokenize(_feat(rng), init_projection(16, 4, 32, seed=0), 4)
    assert tgpd_pair_loss(tok, tok.detached(), 1.0, 1.0).item() == 0.0
    assert tgpd_total(tok, tok.detached(), tok.detached(), 0.6, 0.4).item() == 0.0


def test_two_token_closed_form():
    stu = _state(np.log([[[0.5, 0.5], [0.5, 0.5]]]))
    ref = _state(np.log([[[0.25, 0.75], [0.25, 0.75]]]))
    kl, mse = pair_terms(stu, ref, 1.0)
    expected = 0.5 * math.log(2) - 0.5 * math.log(1.5)
    assert abs(expected - 0.14384) < 1e-5
    assert abs(kl.item() - expected) < 1e-12
    assert mse.item() == 0.0


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.floats(0.1, 5.0))
def test_kl_nonnegative_fuzz(seed, L, tau):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 3, (2, L, L))
    b = rng.normal(0, 3, (2, L, L))
    kl, _ = pair_terms(_state(a), _state(b), tau)
    assert kl.item() >= -1e-15


def test_kl_invariant_to_joint_patch_permutation():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(1, 6, 6)), rng.normal(size=(1, 6, 6))
    perm = np.concatenate([[0], 1 + rng.permutation(5)])
    k1, _ = pair_terms(_state(a), _state(b), 1.3)
    k2, _ = pair_terms(_state(a[:, perm][:, :, perm]), _state(b[:, perm][:, :, perm]), 1.3)
    assert abs(k1.item() - k2.item()) < 1e-12


def test_kl_minimum_at_reference():
    rng = np.random.default_rng(5)
    ref = rng.normal(size=(1, 4, 4))
    base, _ = pair_terms(_state(ref), _state(ref), 1.0)
    for _ in range(20):
        k, _ = pair_terms(_state(ref + rng.normal(0, 0.5, ref.shape)), _state(ref), 1.0)
        assert k.item() > base.item()


def test_beta2_zero_equals_teacher_only():
    rng = np.random.default_rng(6)
    tgpd = init_tgpd(0)
    stu = tokenize(_feat(rng, C=16), tgpd.stores["student"], 4)
    tea = tokenize(_feat(rng, C=32), tgpd.stores["teacher"], 4).detached()
    coa = tokenize(_feat(rng, C=24), tgpd.stores["coach"], 4).detached()
    a = tgpd_total(stu, tea, coa, 0.6, 0.0).item()
    assert a == (tgpd_pair_loss(stu, tea) * 0.6).item()
    assert a == tgpd_total(stu, tea, None, 0.6, 0.0).item()


def test_mse_weight_scales_embedding_term():
    rng = np.random.default_rng(7)
    s = _state(rng.normal(size=(1, 3, 3)), rng.normal(size=(1, 3, 2)))
    r = _state(rng.normal(size=(1, 3, 3)), rng.normal(size=(1, 3, 2)))
    kl, mse = pair_terms(s, r, 1.0)
    assert abs(tgpd_pair_loss(s, r, 1.0, 2.5).item() - (kl.item() + 2.5 * mse.item())) < 1e-12
    assert abs(mse.item() - np.mean((s.seq.data - r.seq.data) ** 2)) < 1e-15


def test_length_mismatch_and_bad_tau_rejected():
    a, b = _state(np.zeros((1, 3, 3))), _state(np.zeros((1, 4, 4)))
    with pytest.raises(ShapeError):
        tgpd_pair_loss(a, b)
    with pytest.raises(ValueError):
        tgpd_pair_loss(a, a, tau=0.0)


def test_embedding_width_must_match():
    tgpd = init_tgpd(0)
    tgpd.stores["coach"] = init_projection(24, 4, 16, seed=0)
    with pytest.raises(ValueError):
        tgpd.validate()


def test_gradients_only_reach_student_side():
    rng = np.random.default_rng(8)
    tgpd = init_tgpd(0)
    f_s = Tensor(rng.normal(size=(1, 16, 8, 8)), requires_grad=True)
    f_t = Tensor(rng.normal(size=(1, 32, 8, 8)), requires_grad=True)
    for t in tgpd.stores["teacher"]:
        t.requires_grad = False
    with Tape() as tape:
        stu = tokenize(f_s, tgpd.stores["student"], 4)
        tea = tokenize(f_t, tgpd.stores["teacher"], 4)
        loss = tgpd_pair_loss(stu, tea)
    tape.backward(loss)
    assert f_s.grad is not None and np.abs(f_s.grad).sum() > 0
    assert f_t.grad is None
    # values are never used by the loss, so wv stays untouched
    assert all(t.grad is not None for k, t in tgpd.stores["student"].items() if k != "wv")


@pytest.mark.parametrize("shape", [(1, 4, 4, 4), (2, 3, 4, 8), (1, 2, 8, 4), (2, 5, 4, 4), (1, 6, 8, 8)])
def test_full_loss_gradcheck(shape):
    rng = np.random.default_rng(sum(shape))
    B, C, H, W = shape
    stu_store = init_projection(C, 2, 6, seed=1)
    ref_store = init_projection(3, 2, 6, seed=2)
    f = Tensor(rng.normal(size=shape), requires_grad=True)
    ref_feat = rng.normal(size=(B, 3, H, W))
    ref = tokenize(Tensor(ref_feat), ref_store, 2).detached()
    coa = tokenize(Tensor(ref_feat[:, ::-1].copy()), ref_store, 2).detached()
    leaves = [f] + [stu_store[k] for k in ("patch.w", "token.w", "wq", "wk")]
    errs = grad_check(lambda: tgpd_total(tokenize(f, stu_store, 2), ref, coa, 0.6, 0.4, tau=1.7), leaves)
    assert max(errs) < 1e-4
