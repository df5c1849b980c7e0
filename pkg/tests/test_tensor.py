import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mvssm import ops
from mvssm.errors import ContractError, DimensionError, NumericError
from mvssm.tensor import Parameter, Tensor, as_tensor

from conftest import f64


def test_zero_extent_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 0)))


def test_only_two_dtypes():
    assert Tensor([1.0]).dtype == np.float32
    assert Tensor([1.0], dtype=np.float64).dtype == np.float64
    with pytest.raises(TypeError):
        Tensor([1], dtype=np.int32)


def test_ids_are_unique():
    a, b = Tensor([1.0]), Tensor([1.0])
    assert a.id != b.id
    assert isinstance(Parameter([1.0]), Tensor)


# -- matmul


def test_matmul_identity():
    m = f64([[1, 2], [3, 4]])
    np.testing.assert_array_equal(ops.matmul(f64(np.eye(2)), m).data, m.data)


def test_matmul_dot():
    assert ops.matmul(f64([[1, 2]]), f64([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    want = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            s = 0.0
            for k in range(5):
                s += a[i, k] * b[k, j]
            want[i, j] = s
    got = ops.matmul(f64(a), f64(b)).data
    # BLAS may group the K-sum differently; integer inputs remove rounding entirely
    np.testing.assert_allclose(got, want, rtol=1e-14, atol=1e-14)
    ai, bi = np.round(a * 8), np.round(b * 8)
    np.testing.assert_array_equal(ops.matmul(f64(ai), f64(bi)).data, ai @ bi)


def test_matmul_shape_error_names_both():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(f64(np.ones((2, 3))), f64(np.ones((4, 5))))


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-10)])
def test_matmul_associative(rng, dtype, tol):
    a, b, c = (Tensor(rng.standard_normal((8, 8)), dtype=dtype) for _ in range(3))
    left = ops.matmul(ops.matmul(a, b), c).data.astype(np.float64)
    right = ops.matmul(a, ops.matmul(b, c)).data.astype(np.float64)
    assert np.max(np.abs(left - right)) / np.max(np.abs(right)) <= tol


# -- dwconv


def test_dwconv_identity_kernel(rng):
    x = f64(rng.standard_normal((2, 5, 6, 3)))
    k = np.zeros((3, 3, 3))
    k[:, 1, 1] = 1.0
    np.testing.assert_array_equal(ops.dwconv2d(x, f64(k)).data, x.data)


def test_dwconv_all_ones_hand_values():
    out = ops.dwconv2d(f64(np.ones((1, 3, 3, 1))), f64(np.ones((1, 3, 3)))).data[0, :, :, 0]
    assert out.tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]


def test_dwconv_channels_independent(rng):
    x = f64(rng.standard_normal((1, 4, 4, 2)))
    k = rng.standard_normal((2, 3, 3))
    base = ops.dwconv2d(x, f64(k)).data
    k2 = k.copy()
    k2[0] += 1.0
    moved = ops.dwconv2d(x, f64(k2)).data
    np.testing.assert_array_equal(moved[..., 1], base[..., 1])
    assert not np.array_equal(moved[..., 0], base[..., 0])


def test_dwconv_errors():
    x = f64(np.ones((1, 4, 4, 2)))
    with pytest.raises(DimensionError):
        ops.dwconv2d(x, f64(np.ones((3, 3, 3))))
    with pytest.raises(ContractError):
        ops.dwconv2d(x, f64(np.ones((2, 2, 2))))


def test_dwconv_matches_naive_loop(rng):
    x, k = rng.standard_normal((1, 5, 4, 2)), rng.standard_normal((2, 3, 3))
    want = np.zeros_like(x)
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    for i in range(5):
        for j in range(4):
            for c in range(2):
                want[0, i, j, c] = np.sum(pad[0, i:i + 3, j:j + 3, c] * k[c])
    np.testing.assert_allclose(ops.dwconv2d(f64(x), f64(k)).data, want, rtol=1e-12, atol=1e-12)


# -- activations


def test_activation_fixed_points():
    z = f64([0.0])
    assert ops.silu(z).item() == 0.0
    assert ops.sigmoid(z).item() == 0.5
    assert ops.softmax(f64([0.0, 0.0])).data.tolist() == [0.5, 0.5]
    assert ops.softplus(z).item() == pytest.approx(0.693147, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 6), elements=st.floats(-300, 300)))
def test_softmax_is_distribution(x):
    p = ops.softmax(f64(x), axis=-1).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_input_is_numeric_error():
    with pytest.raises(NumericError, match="exp"):
        ops.exp(f64([1000.0]))


# -- layernorm


def test_layernorm_constant_vector_is_zero():
    out = ops.layernorm(f64([[3.0, 3.0, 3.0]]), f64([1, 1, 1]), f64([0, 0, 0])).data
    np.testing.assert_array_equal(out, 0.0)


def test_layernorm_already_normalized():
    out = ops.layernorm(f64([1.0, -1.0]), f64([1, 1]), f64([0, 0]), eps=1e-12).data
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-10)


def test_layernorm_moments(rng):
    out = ops.layernorm(f64(rng.standard_normal(64) * 5 + 2), f64(np.ones(64)),
                        f64(np.zeros(64))).data
    assert abs(out.mean()) < 1e-6
    assert abs(out.var() - 1) < 1e-3


def test_layernorm_eps_positive():
    with pytest.raises(ContractError):
        ops.layernorm(f64([1.0, 2.0]), f64([1, 1]), f64([0, 0]), eps=0.0)


# -- pooling


def test_pool_constant_and_mean():
    assert ops.global_avg_pool(f64(np.full((1, 3, 3, 2), 7.0))).data.tolist() == [[7.0, 7.0]]
    x = f64(np.array([1.0, 2, 3, 4]).reshape(1, 2, 2, 1))
    assert ops.global_avg_pool(x).item() == 2.5


def test_pool_matches_double_loop(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    want = np.zeros((2, 4))
    for i in range(3):
        for j in range(5):
            want += x[:, i, j, :]
    want /= 15
    np.testing.assert_allclose(ops.global_avg_pool(f64(x)).data, want, atol=1e-7)


def test_pool_requires_rank4():
    with pytest.raises(DimensionError):
        ops.global_avg_pool(f64(np.ones((3, 4))))


# -- layout


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(4)))
def test_permute_roundtrip(perm):
    x = f64(np.arange(120.0).reshape(2, 3, 4, 5))
    inv = np.argsort(perm)
    back = ops.transpose(ops.transpose(x, perm), inv)
    np.testing.assert_array_equal(back.data, x.data)
    assert sorted(ops.transpose(x, perm).data.ravel()) == sorted(x.data.ravel())


def test_reshape_preserves_order():
    x = f64(np.arange(24.0).reshape(2, 3, 4))
    np.testing.assert_array_equal(ops.reshape(x, (4, 6)).data.ravel(), x.data.ravel())


def test_channel_select_mask_shape_checked():
    a = f64(np.ones((2, 3)))
    with pytest.raises(DimensionError):
        ops.channel_select(a, a, np.array([True, False]))


def test_ops_are_pure(rng):
    x = f64(rng.standard_normal((2, 4, 4, 3)))
    k = f64(rng.standard_normal((3, 3, 3)))
    before = x.data.copy()
    a = ops.dwconv2d(x, k).data
    b = ops.dwconv2d(x, k).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(x.data, before)


def test_as_tensor_follows_dtype():
    like = f64([1.0])
    assert as_tensor(2.0, like).dtype == np.float64
