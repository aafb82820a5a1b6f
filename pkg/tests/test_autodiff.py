import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from irrcurr import autodiff as ad
from irrcurr.errors import ContractViolation, NumericError

from oracles import fd_grad, ref_gelu, ref_layernorm, ref_softmax, rel_err


def T(x, dtype=np.float32):
    return ad.tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def pset(**arrays):
    return ad.ParameterSet({k: ad.tensor(v) for k, v in arrays.items()}, {k: "other" for k in arrays})


# ---- forward ops ---------------------------------------------------------------


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3)).astype(np.float32)
    assert np.array_equal(ad.matmul(T(np.eye(3)), T(a)).data, a)


def test_matmul_hand_example():
    out = ad.matmul(T([[1, 2], [3, 4]]), T([[5], [6]]))
    assert out.data.tolist() == [[17], [39]]


def test_softmax_uniform_row():
    np.testing.assert_allclose(ad.softmax(T([0, 0, 0])).data, [1 / 3] * 3, atol=1e-7)


@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=5, size=(rows, cols))
    p = ad.softmax(T(x)).data.astype(np.float64)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(p, ref_softmax(x), atol=1e-6)


def test_causal_softmax_masks_future():
    x = np.random.default_rng(1).normal(size=(2, 5, 5))
    p = ad.softmax(T(x), causal=True).data
    assert np.all(np.triu(p[0], 1) == 0)
    masked = np.where(np.triu(np.ones((5, 5), bool), 1), -np.inf, x)
    np.testing.assert_allclose(p, ref_softmax(masked), atol=1e-6)


def test_layernorm_and_gelu_match_reference():
    rng = np.random.default_rng(2)
    x, g, b = rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)
    np.testing.assert_allclose(ad.layernorm(T(x), T(g), T(b)).data, ref_layernorm(x, g, b), atol=1e-5)
    np.testing.assert_allclose(ad.gelu(T(x)).data, ref_gelu(x), atol=1e-6)


def test_embedding_lookup():
    table = np.arange(12, dtype=np.float32).reshape(4, 3)
    out = ad.embedding(T(table), np.array([[3, 0]]))
    assert out.data.tolist() == [[[9, 10, 11], [0, 1, 2]]]


@pytest.mark.parametrize(
    "op",
    [
        lambda: ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3)))),
        lambda: ad.add(T(np.ones((2, 3))), T(np.ones((2,)))),
        lambda: ad.mul(T(np.ones((2, 3))), T(np.ones((3, 2)))),
        lambda: ad.layernorm(T(np.ones((2, 3))), T(np.ones(2)), T(np.ones(2))),
        lambda: ad.softmax(T(np.ones((2, 3))), causal=True),
        lambda: ad.embedding(T(np.ones((4, 2))), np.array([4])),
    ],
)
def test_shape_and_range_violations(op):
    with pytest.raises(ContractViolation):
        op()


def test_nonfinite_input_raises():
    x = ad.Tensor(np.array([1.0, np.nan], dtype=np.float32))
    with pytest.raises(NumericError):
        ad.gelu(x)
    with pytest.raises(NumericError):
        ad.tensor([np.inf])


def test_forward_ops_are_pure():
    rng = np.random.default_rng(3)
    x = T(rng.normal(size=(2, 4, 4)))
    a = ad.softmax(x, causal=True, scale=0.5).data
    b = ad.softmax(x, causal=True, scale=0.5).data
    assert a.tobytes() == b.tobytes()


# ---- grad ------------------------------------------------------------------------


def test_grad_of_sum_of_squares():
    p = pset(theta=np.array([1.0, 2.0], dtype=np.float32))
    g = ad.grad(ad.reduce_sum(ad.mul(p["theta"], p["theta"])), p)
    assert g["theta"].tolist() == [2.0, 4.0]


def test_constant_loss_gives_zero_gradient():
    p = pset(theta=np.array([1.0, 2.0], dtype=np.float32))
    loss = ad.reduce_sum(ad.tensor([3.0]))
    g = ad.grad(loss, p)
    assert g["theta"].tolist() == [0.0, 0.0]
    assert list(g) == list(p) and g["theta"].shape == p["theta"].shape


def test_nonfinite_loss_raises():
    p = pset(theta=np.ones(2, dtype=np.float32))
    bad = ad.Tensor(np.array(np.inf, dtype=np.float32), True, (p["theta"],), lambda g, n: (None,))
    with pytest.raises(NumericError):
        ad.grad(bad, p)


def _mlp_loss(x, y):
    def loss(p):
        h = ad.gelu(ad.add(ad.matmul(x, p["w1"]), p["b1"]))
        h = ad.tanh(ad.add(ad.matmul(h, p["w2"]), p["b2"]))
        return ad.cross_entropy(ad.matmul(h, p["w3"]), y)

    return loss


def _random_mlp(seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    n, d, h, c = 6, 5, 7, 4
    arrays = {
        "w1": rng.normal(scale=0.5, size=(d, h)),
        "b1": rng.normal(scale=0.1, size=h),
        "w2": rng.normal(scale=0.5, size=(h, h)),
        "b2": rng.normal(scale=0.1, size=h),
        "w3": rng.normal(scale=0.5, size=(h, c)),
    }
    x = rng.normal(size=(n, d))
    y = rng.integers(0, c, size=n)
    return arrays, x, y


def check_against_fd(loss_builder, arrays, eps=1e-3):
    """float32 autodiff gradient vs a float64 central-difference oracle."""
    names = list(arrays)
    p32 = ad.ParameterSet({k: ad.tensor(arrays[k], dtype=np.float32) for k in names}, {k: "other" for k in names})
    f32 = loss_builder(np.float32)
    g = ad.grad(f32(p32), p32).to_vector()
    f64 = loss_builder(np.float64)
    like = {k: np.asarray(arrays[k]) for k in names}

    def scalar(vec):
        parts = ad.GradientSet.from_vector(vec, like, dtype=np.float64)
        p = ad.ParameterSet({k: ad.tensor(parts[k], dtype=np.float64) for k in names}, {k: "other" for k in names})
        with ad.no_grad():
            return float(f64(p).data)

    x0 = ad.GradientSet({k: np.asarray(arrays[k], np.float64) for k in names}).to_vector()
    return rel_err(g, fd_grad(scalar, x0, eps))


@pytest.mark.parametrize("seed", range(5))
def test_mlp_gradient_matches_finite_differences(seed):
    arrays, x, y = _random_mlp(seed)
    err = check_against_fd(lambda dt: _mlp_loss(ad.tensor(x, dtype=dt), y), arrays)
    assert err < 1e-3


@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(2, 5))
def test_attention_block_gradient_property(seed, b, t):
    rng = np.random.default_rng(seed)
    d = 4
    arrays = {"wq": rng.normal(scale=0.5, size=(d, d)), "wk": rng.normal(scale=0.5, size=(d, d)),
              "g": 1 + 0.1 * rng.normal(size=d), "bb": 0.1 * rng.normal(size=d)}
    x = rng.normal(size=(b, t, d))

    def build(dt):
        xt = ad.tensor(x, dtype=dt)

        def loss(p):
            h = ad.layernorm(xt, p["g"], p["bb"])
            q, k = ad.matmul(h, p["wq"]), ad.matmul(h, p["wk"])
            att = ad.softmax(ad.matmul(q, ad.transpose(k, (0, 2, 1))), causal=True, scale=0.5)
            return ad.reduce_mean(ad.mul(ad.matmul(att, h), ad.matmul(att, h)))

        return loss

    assert check_against_fd(build, arrays) < 1e-3


def test_grad_is_deterministic():
    arrays, x, y = _random_mlp(7)
    p = pset(**{k: v.astype(np.float32) for k, v in arrays.items()})
    f = _mlp_loss(ad.tensor(x, dtype=np.float32), y)
    a, b = ad.grad(f(p), p), ad.grad(f(p), p)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


# ---- hvp -------------------------------------------------------------------------


def _quadratic(A, dtype=np.float64):
    At = ad.tensor(A, dtype=dtype)

    def loss(p):
        th = ad.reshape(p["theta"], (1, -1))
        return ad.mul(ad.reduce_sum(ad.mul(ad.matmul(th, At), th)), 0.5)

    return loss


def test_hvp_diagonal_quadratic():
    p = ad.ParameterSet({"theta": ad.tensor(np.array([0.3, -0.2]), dtype=np.float64)}, {"theta": "dense"})
    hv = ad.hvp(_quadratic(np.diag([3.0, 1.0])), p, {"theta": np.array([1.0, 0.0])})
    np.testing.assert_allclose(hv["theta"], [3.0, 0.0], atol=1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_hvp_random_symmetric_quadratic(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(5, 5))
    A = (m + m.T) / 2
    p = ad.ParameterSet({"theta": ad.tensor(rng.normal(size=5), dtype=np.float64)}, {"theta": "dense"})
    v = rng.normal(size=5)
    hv = ad.hvp(_quadratic(A), p, {"theta": v})
    assert rel_err(hv["theta"], A @ v) < 1e-3


def test_hvp_float32_quadratic():
    p = ad.ParameterSet({"theta": ad.tensor(np.array([0.5, 1.0]), dtype=np.float32)}, {"theta": "dense"})
    hv = ad.hvp(_quadratic(np.diag([3.0, 1.0]), np.float32), p, {"theta": np.array([1.0, 0.0], np.float32)})
    np.testing.assert_allclose(hv["theta"], [3.0, 0.0], atol=1e-3)


def test_hvp_linear_loss_is_zero():
    c = ad.tensor(np.array([[2.0], [-1.0]]), dtype=np.float64)
    p = ad.ParameterSet({"theta": ad.tensor(np.array([0.5, 0.1]), dtype=np.float64)}, {"theta": "dense"})
    hv = ad.hvp(lambda q: ad.reduce_sum(ad.matmul(ad.reshape(q["theta"], (1, 2)), c)), p, {"theta": np.array([0.3, 0.7])})
    np.testing.assert_allclose(hv["theta"], 0.0, atol=1e-4)


def test_hvp_rejects_bad_direction():
    p = ad.ParameterSet({"theta": ad.tensor(np.ones(2), dtype=np.float64)}, {"theta": "dense"})
    with pytest.raises(ContractViolation):
        ad.hvp(_quadratic(np.eye(2)), p, {"theta": np.zeros(2)})
    with pytest.raises(ContractViolation):
        ad.hvp(_quadratic(np.eye(2)), p, {"theta": np.ones(2)}, eps=0.0)


def test_hvp_leaves_parameters_untouched():
    p = ad.ParameterSet({"theta": ad.tensor(np.array([0.3, -0.2]), dtype=np.float64)}, {"theta": "dense"})
    before = p["theta"].data.copy()
    ad.hvp(_quadratic(np.diag([3.0, 1.0])), p, {"theta": np.array([1.0, 2.0])})
    assert p["theta"].data.tobytes() == before.tobytes()


# ---- containers ------------------------------------------------------------------


def test_parameter_set_tags_are_immutable():
    p = ad.ParameterSet({"w": ad.tensor(np.ones(2))}, {"w": "dense"})
    with pytest.raises(TypeError):
        p.tags["w"] = "other"
    with pytest.raises(ContractViolation):
        ad.ParameterSet({"w": ad.tensor(np.ones(2))}, {"w": "bogus"})


def test_gradient_vector_round_trip():
    like = {"a": np.zeros((2, 3)), "b": np.zeros(4)}
    vec = np.arange(10, dtype=np.float64)
    gs = ad.GradientSet.from_vector(vec, like)
    assert np.array_equal(gs.to_vector(), vec)
    with pytest.raises(ContractViolation):
        ad.GradientSet.from_vector(np.arange(9.0), like)


def test_astype_changes_dtype_and_with_arrays_keeps_it():
    p = ad.ParameterSet({"w": ad.tensor(np.ones(3), dtype=np.float32)}, {"w": "dense"})
    p64 = p.astype(np.float64)
    assert p64["w"].data.dtype == np.float64 and p["w"].data.dtype == np.float32
    assert p64.tags == p.tags
    assert p64.with_arrays({"w": np.zeros(3, np.float32)})["w"].data.dtype == np.float64
    assert ad.reduce_mean(ad.mul(p64["w"], p64["w"])).data.dtype == np.float64
