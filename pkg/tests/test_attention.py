import numpy as np
import pytest
from abclust.attention import (AdditiveCompat, CompatKind, MabParams, MhaParams, MultiplicativeCompat,
                               attention, compat, mab, mha, sab)
from abclust.tensor import Tensor, concat_cols, grad_check, layer_norm, matmul, sum_all, elementwise
from abclust.utils import ConfigurationError, DataError, ShapeError

MUL = CompatKind(MultiplicativeCompat())


def additive(w, act="tanh") -> CompatKind:
    return CompatKind(AdditiveCompat(act=act), Tensor([w]))


def test_multiplicative_scaled_dot():
    c = compat(Tensor([[1, 1, 0, 0]]), Tensor([[1, 0, 1, 0]]), MUL)
    assert c.item() == pytest.approx(0.5)


def test_additive_zero_weights():
    rng = np.random.default_rng(0)
    c = compat(Tensor(rng.standard_normal((3, 2))), Tensor(rng.standard_normal((4, 2))),
               additive([0.0, 0.0]))
    assert np.array_equal(c.data, np.zeros((3, 4)))


def test_additive_tanh_is_odd():
    c = compat(Tensor([[0.5, -0.5]]), Tensor([[0.0, 0.0]]), additive([2.0, 2.0]))
    assert c.item() == pytest.approx(0.0, abs=1e-15)


def test_compat_dimension_mismatch():
    with pytest.raises(ShapeError):
        compat(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))), MUL)
    with pytest.raises(ShapeError):
        compat(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))), additive([1.0, 1.0, 1.0]))


def test_compat_kind_checks_weights():
    with pytest.raises(ConfigurationError):
        CompatKind(AdditiveCompat())
    with pytest.raises(ConfigurationError):
        CompatKind(MultiplicativeCompat(), Tensor([[1.0]]))


def test_attention_single_key_returns_value():
    rng = np.random.default_rng(3)
    v = Tensor([[4.0, -1.0, 2.0]])
    out = attention(Tensor(rng.standard_normal((5, 2))), Tensor([[0.3, 0.7]]), v, MUL)
    assert np.allclose(out.data, np.repeat(v.data, 5, axis=0))


def test_attention_identical_keys_average_values():
    keys = Tensor([[1.0, 2.0], [1.0, 2.0]])
    out = attention(Tensor([[0.1, -3.0], [5.0, 5.0]]), keys, Tensor([[1.0, 0.0], [3.0, 2.0]]),
                    additive([0.4, -0.2]))
    assert np.allclose(out.data, [[2.0, 1.0], [2.0, 1.0]])


def test_attention_errors():
    with pytest.raises(DataError):
        attention(Tensor(np.ones((1, 2))), Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))), MUL)
    with pytest.raises(ShapeError):
        attention(Tensor(np.ones((1, 2))), Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))), MUL)


def test_mha_single_head_identity_is_attention():
    rng = np.random.default_rng(4)
    eye = Tensor(np.eye(3))
    p = MhaParams(1, [eye], [eye], [eye], eye, MultiplicativeCompat(), [])
    q, k, v = (Tensor(rng.standard_normal((n, 3))) for n in (2, 4, 4))
    assert np.allclose(mha(q, k, v, p).data, attention(q, k, v, MUL).data, atol=1e-14)


@pytest.mark.parametrize("spec", [MultiplicativeCompat(), AdditiveCompat(act="sigmoid")])
def test_mha_two_heads_matches_manual(spec):
    rng = np.random.default_rng(5)
    p = MhaParams.init(4, 2, spec, rng)
    x = Tensor(rng.standard_normal((5, 4)))
    heads = []
    for i in range(2):
        q, k, v = (x.data @ w.data for w in (p.wq[i], p.wk[i], p.wv[i]))
        c = compat(Tensor(q), Tensor(k), p.head_compat(i)).data
        a = np.exp(c - c.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        heads.append(a @ v)
    expected = np.concatenate(heads, axis=1) @ p.wo.data
    assert np.allclose(mha(x, x, x, p).data, expected, atol=1e-12)


def test_mha_divisibility():
    with pytest.raises(ConfigurationError):
        MhaParams.init(6, 4, MultiplicativeCompat(), np.random.default_rng(0))


def test_mab_residual_only_path():
    rng = np.random.default_rng(6)
    p = MabParams.init(4, 2, MultiplicativeCompat(), rng)
    p.mha.wo.data[...] = 0.0
    p.ff_w2.data[...] = 0.0
    q = Tensor(rng.standard_normal((3, 4)))
    kv = Tensor(rng.standard_normal((5, 4)))
    once = layer_norm(q, p.ln1_gain, p.ln1_bias)
    expected = layer_norm(once, p.ln2_gain, p.ln2_bias)
    assert np.allclose(mab(q, kv, kv, p).data, expected.data, atol=1e-12)


@pytest.mark.parametrize("spec", [MultiplicativeCompat(), AdditiveCompat()])
def test_sab_permutation_equivariant(spec):
    rng = np.random.default_rng(7)
    p = MabParams.init(8, 4, spec, rng)
    x = rng.standard_normal((6, 8))
    perm = rng.permutation(6)
    a = sab(Tensor(x), p).data
    b = sab(Tensor(x[perm]), p).data
    assert np.max(np.abs(a[perm] - b)) <= 1e-12


@pytest.mark.parametrize("spec", [MultiplicativeCompat(), AdditiveCompat()])
def test_sab_gradients(spec):
    rng = np.random.default_rng(8)
    p = MabParams.init(4, 2, spec, rng)
    x = Tensor(rng.standard_normal((3, 4)))
    params = [t for _, t in p.named("b")]
    head = Tensor(rng.standard_normal((4, 1)))

    def f():
        return sum_all(elementwise(matmul(sab(x, p), head), "tanh"))

    assert grad_check(f, params, floor=1e-7) <= 1e-4


def test_named_parameters_are_unique():
    p = MabParams.init(4, 2, AdditiveCompat(), np.random.default_rng(0))
    names = [n for n, _ in p.named("b")]
    assert len(names) == len(set(names))
    assert "b.mha.compat_w.1" in names
    assert concat_cols([t for n, t in p.named("b") if n.startswith("b.mha.wq")]).shape == (4, 4)
