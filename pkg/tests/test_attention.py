import math

import numpy as np
import pytest

from molct import autodiff as ad
from molct.attention import MhaParams, PositionWiseFFN, dot_attention, mha, position_wise_ffn
from molct.autodiff import ContractError, Tensor


def test_single_row_returns_value_and_decay():
    out, alpha = dot_attention(Tensor([0.3, -1.0]), Tensor([[2.0, 1.0]]), Tensor([[5.0, 7.0]]),
                               allowed=[True], decay=Tensor([0.4]))
    assert np.allclose(alpha.data, [0.4])
    assert np.allclose(out.data, [2.0, 2.8])
    out, alpha = dot_attention(Tensor([0.3, -1.0]), Tensor([[2.0, 1.0]]), Tensor([[5.0, 7.0]]))
    assert np.array_equal(out.data, [5.0, 7.0]) and alpha.data[0] == 1.0


def test_identical_keys_uniform():
    K = np.tile([[0.2, -0.5, 1.0]], (4, 1))
    _, alpha = dot_attention(Tensor([1.0, 2.0, 3.0]), Tensor(K), Tensor(np.eye(4, 3)))
    assert np.allclose(alpha.data, 0.25, atol=1e-15)


def test_two_row_hand_softmax():
    _, alpha = dot_attention(Tensor([1.0, 0.0]), Tensor(np.eye(2)), Tensor(np.eye(2)))
    a = math.exp(1 / math.sqrt(2))
    assert np.allclose(alpha.data, [a / (a + 1), 1 / (a + 1)], atol=1e-15)


def test_all_disallowed_is_contract_error():
    with pytest.raises(ContractError):
        dot_attention(Tensor([1.0, 0.0]), Tensor(np.eye(2)), Tensor(np.eye(2)), allowed=[False, False])


def test_masked_rows_contribute_nothing():
    rng = np.random.default_rng(0)
    Q, K, V = rng.normal(size=4), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    allowed = np.array([True, False, True, False, True])
    out1, alpha = dot_attention(Tensor(Q), Tensor(K), Tensor(V), allowed=allowed)
    V2 = V.copy()
    V2[~allowed] = rng.normal(size=(2, 4)) * 1e6
    out2, _ = dot_attention(Tensor(Q), Tensor(K), Tensor(V2), allowed=allowed)
    assert np.array_equal(out1.data, out2.data)
    assert np.all(alpha.data[~allowed] == 0.0)
    assert abs(alpha.data.sum() - 1.0) < 1e-12


def test_joint_row_permutation():
    rng = np.random.default_rng(1)
    Q, K, V = rng.normal(size=4), rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    allowed = rng.random(6) > 0.3
    allowed[0] = True
    decay = rng.random(6)
    out, alpha = dot_attention(Tensor(Q), Tensor(K), Tensor(V), allowed, Tensor(decay))
    for _ in range(20):
        p = rng.permutation(6)
        o2, a2 = dot_attention(Tensor(Q), Tensor(K[p]), Tensor(V[p]), allowed[p], Tensor(decay[p]))
        assert np.max(np.abs(o2.data - out.data)) < 1e-12
        assert np.allclose(a2.data, alpha.data[p], atol=1e-15)


def test_mha_joint_permutation_fifty_trials():
    rng = np.random.default_rng(2)
    params = MhaParams(rng, 8, 2)
    Q, K, V = rng.normal(size=8), rng.normal(size=(7, 8)), rng.normal(size=(7, 8))
    allowed = rng.random(7) > 0.4
    allowed[3] = True
    out = mha(Tensor(Q), Tensor(K), Tensor(V), params, allowed=allowed).data
    worst = 0.0
    for _ in range(50):
        p = rng.permutation(7)
        o2 = mha(Tensor(Q), Tensor(K[p]), Tensor(V[p]), params, allowed=allowed[p]).data
        worst = max(worst, np.max(np.abs(o2 - out)))
    assert worst < 1e-10


def test_decay_sweep_moves_toward_output_without_row():
    rng = np.random.default_rng(3)
    Q, K, V = rng.normal(size=3), rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    base = dot_attention(Tensor(Q), Tensor(K), Tensor(V), decay=Tensor(np.array([1, 1, 1, 0.0])))[0].data
    dists = []
    for w in np.linspace(1.0, 0.0, 21):
        out = dot_attention(Tensor(Q), Tensor(K), Tensor(V), decay=Tensor(np.array([1, 1, 1, w])))[0].data
        dists.append(np.linalg.norm(out - base))
    assert np.all(np.diff(dists) <= 1e-15) and dists[-1] == 0.0


def test_mha_zero_output_projection():
    rng = np.random.default_rng(4)
    params = MhaParams(rng, 8, 4)
    params.w_o.data[:] = 0.0
    out = mha(Tensor(rng.normal(size=8)), Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(3, 8))), params)
    assert np.array_equal(out.data, np.zeros(8))


def test_mha_single_head_identity_reduces_to_dot_attention():
    rng = np.random.default_rng(5)
    params = MhaParams(rng, 4, 1)
    for w in (params.w_q, params.w_k, params.w_v, params.w_o):
        w.data[:] = np.eye(4)
    Q, K, V = rng.normal(size=4), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    a = mha(Tensor(Q), Tensor(K), Tensor(V), params).data
    b = dot_attention(Tensor(Q), Tensor(K), Tensor(V))[0].data
    assert np.allclose(a, b, atol=1e-14)


def test_mha_eight_heads_shape_and_alpha():
    rng = np.random.default_rng(6)
    params = MhaParams(rng, 64, 8)
    out, alpha = mha(Tensor(rng.normal(size=(2, 64))), Tensor(rng.normal(size=(2, 5, 64))),
                     Tensor(rng.normal(size=(2, 5, 64))), params, return_alpha=True)
    assert out.shape == (2, 64) and alpha.shape == (2, 8, 5)
    assert np.allclose(alpha.data.sum(-1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        MhaParams(rng, 10, 4)


def test_mha_per_head_scale():
    rng = np.random.default_rng(7)
    D, H = 8, 2
    params = MhaParams(rng, D, H)
    Q, K, V = rng.normal(size=D), rng.normal(size=(3, D)), rng.normal(size=(3, D))
    _, alpha = mha(Tensor(Q), Tensor(K), Tensor(V), params, return_alpha=True)
    c = D // H
    q, k = Q @ params.w_q.data, K @ params.w_k.data
    for h in range(H):
        s = k[:, h * c:(h + 1) * c] @ q[h * c:(h + 1) * c] / math.sqrt(c)
        ref = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
        assert np.allclose(alpha.data[h], ref, atol=1e-15)


def test_ffn_zero_weights_and_sharing():
    rng = np.random.default_rng(8)
    ffn = PositionWiseFFN(rng, 6)
    assert ffn.inner.weight.shape == (6, 12)
    x = np.tile(rng.normal(size=6), (3, 1))
    out = position_wise_ffn(Tensor(x), ffn).data
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])
    for p in ffn.parameters():
        p.data[:] = 0.0
    assert np.array_equal(position_wise_ffn(Tensor(x), ffn).data, np.zeros((3, 6)))


def test_ffn_and_attention_gradients():
    rng = np.random.default_rng(9)
    ffn = PositionWiseFFN(rng, 4)
    x0 = rng.normal(size=(3, 4))
    x = Tensor(x0.copy(), requires_grad=True)
    (g,) = ad.grad(ad.tsum(ad.sin(ffn(x))), [x])
    num = ad.finite_diff_grad(lambda v: float(np.sum(np.sin(ffn(Tensor(v)).data))), x0.copy())
    assert np.max(np.abs(g.data - num) / np.maximum(np.abs(num), 1e-6)) < 1e-5

    params = MhaParams(rng, 4, 2)
    K0 = rng.normal(size=(5, 4))
    decay = Tensor(rng.random(5))

    def f(k):
        return ad.tsum(ad.sin(mha(Tensor(x0[0]), k, k, params, allowed=np.arange(5) != 2, decay=decay)))

    K = Tensor(K0.copy(), requires_grad=True)
    (g,) = ad.grad(f(K), [K])
    num = ad.finite_diff_grad(lambda v: float(f(Tensor(v)).data), K0.copy())
    assert np.max(np.abs(g.data - num) / np.maximum(np.abs(num), 1e-6)) < 1e-5
