import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvssm import ops
from mvssm.autodiff import Tape, backward, gradcheck
from mvssm.errors import ContractError, NumericError
from mvssm.module import Init
from mvssm.ssm import (STRATEGIES, SsmParams, apply_element, compose, discretize, linear_scan,
                       lti_conv_oracle, scan_core, select_params, selective_scan,
                       selective_scan_parallel, selective_scan_seq)
from mvssm.tensor import Parameter

from conftest import f64


def params(C=3, N=4, seed=0, **kw):
    return SsmParams(C, N, Init(seed, dtype=np.float64), **kw)


def set_lti(p, a_bar, b_bar, c, d, delta=np.log(2.0)):
    """Constant projections: delta = softplus(0) = ln 2, B and C from biases.

    A_log is chosen so exp(delta*A) == a_bar; B_bias absorbs the ZOH factor so
    the discrete input weight equals b_bar."""
    C, N = p.channels, p.state
    a = np.log(a_bar) / delta
    p.A_log.data[...] = np.log(-a) * np.ones((C, N))
    p.W_dt.data[...] = 0.0
    p.dt_bias.data[...] = 0.0
    p.W_B.data[...] = 0.0
    p.B_bias.data[...] = b_bar * a / (a_bar - 1.0)
    p.W_C.data[...] = 0.0
    p.C_bias.data[...] = c
    p.D.data[...] = d


# -- select_params


def test_zero_input_selection():
    p = params()
    sel = select_params(f64(np.zeros((5, 3))), p)
    np.testing.assert_allclose(sel.delta.data, np.log(2.0))
    np.testing.assert_array_equal(sel.B.data, 0.0)
    np.testing.assert_array_equal(sel.C.data, 0.0)


def test_constant_dt_projection(rng):
    p = params()
    p.W_dt.data[...] = 0.0
    p.dt_bias.data[...] = [0.3, -1.0, 2.0]
    sel = select_params(f64(rng.standard_normal((6, 3))), p)
    want = np.log1p(np.exp([0.3, -1.0, 2.0]))
    np.testing.assert_allclose(sel.delta.data, np.broadcast_to(want, (6, 3)))


def test_delta_positive_over_many_draws(rng):
    p = params(C=4)
    p.W_dt.data[...] = rng.standard_normal((4, 4)) * 3
    sel = select_params(f64(rng.standard_normal((10_000, 4)) * 5), p)
    assert (sel.delta.data > 0).all()


# -- discretize


def test_discretize_limit_branch():
    s = discretize(0.0, 2.0, 0.5)
    assert s.a_bar == 1.0 and s.b_bar == 1.0


def test_discretize_closed_form():
    s = discretize(-1.0, 1.0, np.log(2.0))
    assert s.a_bar == pytest.approx(0.5, abs=1e-15)
    assert s.b_bar == pytest.approx(0.5, abs=1e-15)


def test_discretize_extended_precision():
    import mpmath

    mpmath.mp.dps = 40
    z = mpmath.mpf(-2) * mpmath.mpf("0.1")
    a_ref = mpmath.exp(z)
    b_ref = (mpmath.exp(z) - 1) / mpmath.mpf(-2) * 3
    s = discretize(-2.0, 3.0, 0.1)
    assert s.a_bar == pytest.approx(float(a_ref), abs=1e-15)
    assert s.b_bar == pytest.approx(float(b_ref), abs=1e-15)
    assert round(float(s.a_bar), 6) == 0.818731
    assert round(float(s.b_bar), 6) == 0.271904


def test_discretize_rejects_nonpositive_delta():
    with pytest.raises(ContractError):
        discretize(-1.0, 1.0, 0.0)


def test_stability_range(rng):
    A = -np.exp(rng.standard_normal(1000))
    s = discretize(A, np.ones(1000), np.exp(rng.standard_normal(1000)))
    assert ((s.a_bar > 0) & (s.a_bar < 1)).all()


# -- sequential scan


def test_hand_recurrence():
    p = params(C=1, N=1)
    set_lti(p, 0.5, 1.0, 1.0, 0.0)
    y = selective_scan_seq(f64([[1.0], [1.0], [1.0]]), p).data[:, 0]
    np.testing.assert_allclose(y, [1.0, 1.5, 1.75], rtol=1e-14)


def test_zero_b_projection_is_skip(rng):
    p = params()
    p.W_B.data[...] = 0.0
    x = f64(rng.standard_normal((7, 3)))
    np.testing.assert_array_equal(selective_scan_seq(x, p).data, x.data)


def test_zero_c_projection_is_decoupled(rng):
    p = params()
    p.W_C.data[...] = 0.0
    p.D.data[...] = [0.5, -2.0, 3.0]
    x = f64(rng.standard_normal((7, 3)))
    np.testing.assert_allclose(selective_scan_seq(x, p).data, x.data * p.D.data, rtol=1e-15)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflow_reports_timestep():
    u = f64(np.full((6, 1), 1e300))
    with pytest.raises(NumericError, match="timestep"):
        scan_core(u, f64(np.ones((6, 1))), f64(-np.ones((1, 2))) * 1e-9, f64(np.ones((6, 2)) * 1e10),
                  f64(np.ones((6, 2))), f64(np.ones(1)))


# -- parallel strategies


def test_length_one_bit_exact(rng):
    p = params()
    x = f64(rng.standard_normal((1, 3)))
    seq = selective_scan_seq(x, p).data
    for strategy in ("chunked", "blelloch"):
        np.testing.assert_array_equal(selective_scan_parallel(x, p, strategy=strategy).data, seq)


@pytest.mark.parametrize("strategy", ["chunked", "blelloch", "fused"])
@pytest.mark.parametrize("chunk", [1, 2, 7, 64])
def test_parallel_matches_sequential(rng, strategy, chunk):
    p = params(C=4, N=8, seed=chunk)
    p.W_B.data *= 20
    p.W_C.data *= 20
    x = f64(rng.standard_normal((2, 64, 4)))
    seq = selective_scan_seq(x, p).data
    par = selective_scan(x, p, strategy=strategy, chunk=chunk).data
    assert np.max(np.abs(par - seq) / (np.abs(seq) + 1e-9)) <= 1e-6


def test_composition_law(rng):
    e1 = (rng.uniform(0, 1, 5), rng.standard_normal(5))
    e2 = (rng.uniform(0, 1, 5), rng.standard_normal(5))
    h = rng.standard_normal(5)
    np.testing.assert_allclose(apply_element(compose(e2, e1), h),
                               apply_element(e2, apply_element(e1, h)), rtol=1e-14, atol=1e-15)


def test_identity_element(rng):
    e = (rng.uniform(0, 1, 3), rng.standard_normal(3))
    ident = (np.ones(3), np.zeros(3))
    for got in (compose(e, ident), compose(ident, e)):
        np.testing.assert_array_equal(got[0], e[0])
        np.testing.assert_array_equal(got[1], e[1])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 9), st.sampled_from(["chunked", "blelloch"]))
def test_linear_scan_matches_loop(n, chunk, strategy):
    rng = np.random.default_rng(n * 31 + chunk)
    a, b = rng.uniform(0, 1, (n, 3)), rng.standard_normal((n, 3))
    want = linear_scan(a, b, strategy="sequential")
    np.testing.assert_allclose(linear_scan(a, b, strategy=strategy, chunk=chunk), want,
                               rtol=1e-12, atol=1e-12)


def test_unknown_strategy():
    with pytest.raises(ContractError):
        linear_scan(np.ones(3), np.ones(3), strategy="magic")


# -- LTI oracle


def test_oracle_impulse():
    np.testing.assert_allclose(lti_conv_oracle([1, 0, 0], 0.5, 1.0, 1.0, 0.0), [1, 0.5, 0.25])


def test_oracle_zero_input():
    np.testing.assert_array_equal(lti_conv_oracle(np.zeros(5), 0.9, 2.0, 1.0, 1.0), 0.0)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_oracle_equivalence_64bit(rng, strategy):
    p = params(C=1, N=1)
    set_lti(p, 0.8, 0.7, 1.3, 0.4)
    x = rng.standard_normal(32)
    got = selective_scan(f64(x[:, None]), p, strategy=strategy, chunk=5).data[:, 0]
    np.testing.assert_allclose(got, lti_conv_oracle(x, 0.8, 0.7, 1.3, 0.4), atol=1e-10)


def test_oracle_equivalence_32bit(rng):
    p = SsmParams(1, 1, Init(0))
    set_lti(p, 0.8, 0.7, 1.3, 0.4)
    x = rng.standard_normal(32)
    got = selective_scan(x[:, None].astype(np.float32), p).data[:, 0]
    np.testing.assert_allclose(got, lti_conv_oracle(x, 0.8, 0.7, 1.3, 0.4), atol=1e-5)


def test_bounded_states(rng):
    p = params(C=1, N=1)
    set_lti(p, 0.9, 0.5, 1.0, 0.0)
    x = rng.uniform(-1, 1, 200)
    # with C = 1, D = 0 the output is the state itself
    h = selective_scan_seq(f64(x[:, None]), p).data[:, 0]
    assert np.max(np.abs(h)) <= np.max(np.abs(0.5 * x)) / (1 - 0.9) + 1e-12


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_causality(rng, strategy):
    p = params(C=2, N=3)
    x = rng.standard_normal((20, 2))
    base = selective_scan(f64(x), p, strategy=strategy, chunk=4).data
    x[12] += 1.0
    moved = selective_scan(f64(x), p, strategy=strategy, chunk=4).data
    np.testing.assert_array_equal(moved[:12], base[:12])
    assert not np.array_equal(moved[12:], base[12:])


# -- gradients


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_scan_gradcheck(rng, strategy):
    p = params(C=3, N=4)
    for name, t in p.named_parameters():
        t.data[...] += rng.standard_normal(t.shape) * 0.3
    x = Parameter(rng.standard_normal((2, 9, 3)), dtype=np.float64)
    w = f64(rng.standard_normal((2, 9, 3)))
    fn = lambda: ops.sum(ops.mul(selective_scan(x, p, strategy=strategy, chunk=4), w))  # noqa: E731
    rep = gradcheck(fn, {"x": x, **dict(p.named_parameters())})
    assert rep.max_rel_err <= 1e-4, rep


def test_stacked_params_broadcast(rng):
    p = params(C=3, N=2, stack=(4,))
    x = f64(rng.standard_normal((4, 2, 5, 3)))
    y = selective_scan(x, p).data
    for d in range(4):
        single = params(C=3, N=2)
        for name, t in single.named_parameters():
            t.data[...] = dict(p.named_parameters())[name].data[d]
        np.testing.assert_allclose(y[d], selective_scan(f64(x.data[d]), single).data,
                                   rtol=1e-13, atol=1e-13)


def test_fused_grads_match_reference(rng):
    p = params(C=3, N=4)
    x = Parameter(rng.standard_normal((2, 11, 3)), dtype=np.float64)
    out = {}
    for strategy in ("sequential", "fused"):
        with Tape() as tape:
            loss = ops.sum(ops.sigmoid(selective_scan(x, p, strategy=strategy)))
        g = backward(tape, loss)
        out[strategy] = [g.of(x)] + [g.of(t) for _, t in p.named_parameters()]
    for a, b in zip(out["sequential"], out["fused"]):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
