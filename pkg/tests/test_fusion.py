import numpy as np
import pytest

from stvla import tensor as T
from stvla.embed import SpatioTemporalEmbedder
from stvla.fusion import (AdditiveFuser, ConcatFuser, CrossAttentionFuser,
                          ScalarGateFuser, make_fuser)
from stvla.tensor import Tensor, grad_check

D = 16


def make_pair(rng, n=4, batch=None):
    shape = (n, D) if batch is None else (batch, n, D)
    return Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=shape))


def test_zero_wv_is_identity_bitwise():
    rng = np.random.default_rng(0)
    fuser = CrossAttentionFuser(D, rng)
    fuser.w_v.data[:] = 0.0
    f_v, f4d = make_pair(rng)
    out = fuser.fuse(f_v, f4d)
    assert np.array_equal(out.data, f_v.data)


def test_single_token_closed_form():
    rng = np.random.default_rng(1)
    fuser = CrossAttentionFuser(D, rng)
    f_v, f4d = make_pair(rng, n=1)
    out = fuser.fuse(f_v, f4d)
    ref = f_v.data + f4d.data @ fuser.w_v.data
    np.testing.assert_array_equal(out.data, ref)


def test_matches_hand_unrolled_reference():
    # explicit loops over queries and keys, no matrix shortcuts
    rng = np.random.default_rng(2)
    fuser = CrossAttentionFuser(D, rng)
    f_v, f4d = make_pair(rng, n=4)
    got = fuser.fuse(f_v, f4d).data

    q = f_v.data @ fuser.w_q.data
    k = f4d.data @ fuser.w_k.data
    v = f4d.data @ fuser.w_v.data
    ref = np.zeros_like(f_v.data)
    for i in range(4):
        scores = np.array([np.dot(q[i], k[j]) / np.sqrt(D) for j in range(4)])
        w = np.exp(scores - scores.max())
        w /= w.sum()
        acc = np.zeros(D)
        for j in range(4):
            acc += w[j] * v[j]
        ref[i] = f_v.data[i] + acc
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(3)
    fuser = CrossAttentionFuser(D, rng)
    f_v, f4d = make_pair(rng, n=7)
    rows = fuser.attention_rows(f_v, f4d)
    np.testing.assert_allclose(rows.sum(axis=-1), np.ones(7), rtol=0, atol=1e-12)


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    fuser = CrossAttentionFuser(D, rng)
    f_v, f4d = make_pair(rng, n=6)
    perm = rng.permutation(6)
    out = fuser.fuse(f_v, f4d).data
    out_perm = fuser.fuse(Tensor(f_v.data[perm]), Tensor(f4d.data[perm])).data
    assert np.abs(out[perm] - out_perm).max() <= 1e-12


def test_batched_matches_per_sample():
    rng = np.random.default_rng(5)
    fuser = CrossAttentionFuser(D, rng)
    f_v, f4d = make_pair(rng, n=5, batch=3)
    batched = fuser.fuse(f_v, f4d).data
    for b in range(3):
        single = fuser.fuse(Tensor(f_v.data[b]), Tensor(f4d.data[b])).data
        np.testing.assert_allclose(batched[b], single, rtol=0, atol=1e-14)


def test_gradients_reach_fuser_and_upstream_embedder():
    rng = np.random.default_rng(6)
    fuser = CrossAttentionFuser(D, rng)
    emb = SpatioTemporalEmbedder(d=8, d_embed=12, d_model=D, rng=rng)
    p = Tensor(rng.normal(size=(4, 3)))
    t = Tensor(rng.uniform(size=(4, 1)))
    f_v = Tensor(rng.normal(size=(4, D)))
    c = Tensor(rng.normal(size=(4, D)))

    def loss():
        f4d_hat = emb.match_dim(emb.embed(p, t))
        return T.tsum(T.mul(fuser.fuse(f_v, f4d_hat), c))

    params = list(fuser.params().values()) + list(emb.params().values())
    report = grad_check(loss, params, rng=rng)
    assert report.passed, report.worst()
    for name, param in {**fuser.params(), **emb.params()}.items():
        assert param.grad is not None and np.abs(param.grad).max() > 0, name


def test_shape_mismatch_rejected():
    rng = np.random.default_rng(7)
    fuser = CrossAttentionFuser(D, rng)
    with pytest.raises(ValueError):
        fuser.fuse(Tensor(np.zeros((3, D))), Tensor(np.zeros((4, D))))
    with pytest.raises(ValueError):
        fuser.fuse(Tensor(np.zeros((3, 8))), Tensor(np.zeros((3, 8))))


def test_fuser_lora_zero_b_is_identity():
    rng = np.random.default_rng(8)
    fuser = CrossAttentionFuser(D, rng)
    f_v, f4d = make_pair(rng)
    before = fuser.fuse(f_v, f4d).data.copy()
    fuser.add_lora(rank=2, alpha=4.0, rng=rng)
    after = fuser.fuse(f_v, f4d).data
    np.testing.assert_array_equal(before, after)
    assert len(fuser.lora_params()) == 6


# ---------------------------------------------------------------------------
# alternative strategies share the interface


def test_additive_fuser_is_plain_sum():
    rng = np.random.default_rng(9)
    fuser = AdditiveFuser(D, rng)
    f_v, f4d = make_pair(rng)
    np.testing.assert_array_equal(fuser.fuse(f_v, f4d).data, f_v.data + f4d.data)
    assert fuser.params() == {}


def test_gate_fuser_scales_embedding_block():
    rng = np.random.default_rng(10)
    fuser = ScalarGateFuser(D, rng)
    fuser.gate.data[:] = 0.25
    f_v, f4d = make_pair(rng)
    np.testing.assert_allclose(fuser.fuse(f_v, f4d).data,
                               f_v.data + 0.25 * f4d.data, rtol=0, atol=1e-15)
    g = grad_check(lambda: T.tsum(fuser.fuse(f_v, f4d)), [fuser.gate], rng=rng)
    assert g.passed


def test_concat_fuser_starts_as_identity_on_visual():
    rng = np.random.default_rng(11)
    fuser = ConcatFuser(D, rng)
    fuser.w_cat.data[D:] = 0.0  # drop the init noise on the 4D block
    f_v, f4d = make_pair(rng)
    np.testing.assert_allclose(fuser.fuse(f_v, f4d).data, f_v.data, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", ["attention", "concat", "gate", "additive"])
def test_factory_round_trip(kind):
    fuser = make_fuser(kind, D, np.random.default_rng(0))
    assert fuser.kind == kind
    rng = np.random.default_rng(12)
    f_v, f4d = make_pair(rng)
    out = fuser.fuse(f_v, f4d)
    assert out.shape == (4, D)


def test_factory_rejects_unknown():
    with pytest.raises(ValueError):
        make_fuser("bilinear", D, np.random.default_rng(0))
