import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcbflab import autodiff as ad
from gcbflab.autodiff import Step, Tape, Tensor, evaluate_and_backprop, gradient_check
from gcbflab.optim import AdamState, adam_update
from gcbflab.rng import RngState

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)


# --- tape and primitives -------------------------------------------------------------


def test_square_value_and_gradient():
    prog = [Step("mul", ("x", "x"), "y")]
    (y,), (g,) = evaluate_and_backprop(prog, {"x": np.array(3.0)}, "y")
    assert y == 9.0 and g == 6.0


def test_softmax_single_element_axis_is_constant():
    prog = [Step("softmax", ("x",), "s", {"axis": 0}), Step("scale", ("s",), "y", {"c": 5.0})]
    (y,), (g,) = evaluate_and_backprop(prog, {"x": np.array([0.7])}, "y")
    assert y.tolist() == [5.0]
    assert g.tolist() == [0.0]


def test_unknown_primitive_rejected():
    with pytest.raises(ad.UnknownPrimitiveError):
        evaluate_and_backprop([Step("conv", ("x",), "y")], {"x": np.ones(2)}, "y")


def test_shape_mismatch_rejected():
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_non_finite_intermediate_rejected():
    tape = Tape()
    x = tape.variable(np.array([1.0, -1.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.log(x)
    with pytest.raises(ad.NonFiniteError):
        ad.exp(ad.scale(tape.variable(np.array([1.0])), 1e4))


def test_non_participating_gradient_is_zero():
    tape = Tape()
    x, z = tape.variable(np.ones(3)), tape.variable(np.ones(2))
    y = ad.sum_(ad.mul(x, x))
    gx, gz = tape.grad(y, [x, z])
    assert np.array_equal(gz, np.zeros(2))
    assert np.array_equal(gx, 2 * np.ones(3))


def test_backward_visits_reverse_recording_order():
    tape = Tape()
    x = tape.variable(np.array(2.0))
    a = ad.mul(x, x)
    b = ad.mul(a, x)
    assert [r.output for r in tape.records] == [a.idx, b.idx]
    (g,) = tape.grad(b, [x])
    assert g == pytest.approx(12.0)


def _mlp(seed):
    gen = np.random.default_rng(seed)
    Ws = [gen.standard_normal((5, 16)) / 2, gen.standard_normal((16, 16)) / 4, gen.standard_normal((16, 1)) / 4]
    bs = [gen.standard_normal(16) * 0.1, gen.standard_normal(16) * 0.1, gen.standard_normal(1) * 0.1]

    def f(x):
        h = x
        for k, (W, b) in enumerate(zip(Ws, bs)):
            h = ad.add(ad.matmul(h, Tensor(W)), Tensor(b))
            if k < 2:
                h = ad.tanh(h)
        return ad.sum_(h)

    return f, gen.standard_normal((3, 5))


@pytest.mark.parametrize("seed", range(5))
def test_mlp_gradient_matches_central_differences(seed):
    f, x = _mlp(seed)
    rep = gradient_check(f, x, step=1e-6, tolerance=1e-5)
    assert rep.passed, rep
    assert rep.n_checked == x.size


PRIMS = {
    "add": lambda x: ad.sum_(ad.add(x, ad.scale(x, 0.3))),
    "sub": lambda x: ad.sum_(ad.mul(ad.sub(x, Tensor(np.arange(x.shape[-1]) * 0.1)), x)),
    "mul": lambda x: ad.sum_(ad.mul(x, ad.tanh(x))),
    "matmul": lambda x: ad.sum_(ad.tanh(ad.matmul(x, Tensor(np.linspace(-1, 1, 12).reshape(4, 3))))),
    "tanh": lambda x: ad.sum_(ad.tanh(x)),
    "exp": lambda x: ad.sum_(ad.exp(ad.scale(x, 0.5))),
    "log": lambda x: ad.sum_(ad.log(ad.add(ad.mul(x, x), Tensor(1.0)))),
    "max": lambda x: ad.sum_(ad.max_(x, axis=1)),
    "softmax": lambda x: ad.sum_(ad.mul(ad.softmax(x, axis=1), Tensor(np.arange(4.0)))),
    "concatenate": lambda x: ad.sum_(ad.tanh(ad.concatenate([x, ad.scale(x, 2.0)], axis=1))),
    "slice": lambda x: ad.sum_(ad.mul(ad.slice_(x, (np.array([0, 0, 1]), slice(None))), Tensor(np.arange(12.0).reshape(3, 4)))),
    "hinge": lambda x: ad.sum_(ad.hinge(x)),
    "relu": lambda x: ad.sum_(ad.mul(ad.relu(x), x)),
    "l2_norm": lambda x: ad.sum_(ad.l2_norm(x, axis=1)),
}


@pytest.mark.parametrize("name", sorted(PRIMS))
@settings(max_examples=15, deadline=None)
@given(data=st.lists(finite, min_size=8, max_size=8))
def test_primitive_gradients(name, data):
    x = np.array(data).reshape(2, 4)
    rep = gradient_check(PRIMS[name], x, step=1e-6, tolerance=1e-5)
    assert rep.passed, (name, rep.max_rel_error, rep.worst_coordinate)


def test_linear_function_exact():
    c = np.array([1.5, -2.0, 0.25])
    rep = gradient_check(lambda x: ad.sum_(ad.mul(x, Tensor(c))), np.array([0.3, 0.1, -0.7]), tolerance=1e-10)
    assert rep.passed and rep.max_rel_error < 1e-10


def test_relu_at_zero_is_skipped_not_failed():
    rep = gradient_check(lambda x: ad.sum_(ad.relu(x)), np.array([0.0, 1.0]))
    assert rep.passed
    assert (0,) in rep.skipped and rep.n_checked == 1


def test_gradient_check_reports_nonfinite_neighbourhood():
    with pytest.raises(ad.NonFiniteError):
        gradient_check(lambda x: ad.sum_(ad.log(x)), np.array([1e-7]), step=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=1, max_size=9), finite)
def test_softmax_normalised_and_shift_invariant(xs, c):
    x = np.array(xs)[None]
    s = ad.softmax(Tensor(x), axis=1).data
    assert abs(s.sum() - 1.0) < 1e-12
    s2 = ad.softmax(Tensor(x + c), axis=1).data
    assert np.max(np.abs(s - s2)) < 1e-12


def test_softmax_padding_leaves_bits_unchanged():
    x = np.random.default_rng(0).standard_normal((3, 7, 1))
    ref = ad.softmax(Tensor(x), axis=1).data
    for extra in range(1, 30):
        y = np.concatenate([x, np.full((3, extra, 1), -1e30)], axis=1)
        assert np.array_equal(ad.softmax(Tensor(y), axis=1).data[:, :7], ref)


@pytest.mark.parametrize("K,N", [(9, 256), (256, 128), (128, 1)])
def test_matmul_rows_do_not_depend_on_other_rows(K, N):
    gen = np.random.default_rng(K + N)
    W, row = gen.standard_normal((K, N)), gen.standard_normal(K)
    ref = ad.matmul(Tensor(row[None]), Tensor(W)).data[0]
    for M in (2, 3, 7, 8, 9, 31, 64, 257):
        X = gen.standard_normal((M, K))
        X[M // 2] = row
        assert np.array_equal(ad.matmul(Tensor(X), Tensor(W)).data[M // 2], ref)


def test_forward_is_deterministic():
    f, x = _mlp(3)
    assert f(Tensor(x)).data.tobytes() == f(Tensor(x)).data.tobytes()


# --- Adam -------------------------------------------------------------------------------


def test_adam_zero_gradient_is_fixed_point():
    p = [np.array([1.0, -2.0])]
    st0 = AdamState([np.array([0.5, 0.5])], [np.array([0.1, 0.1])], 3)
    (q,), st1 = adam_update(p, [np.zeros(2)], st0)
    # the moments keep moving the parameter unless they are zero themselves
    st_zero = AdamState.zeros_like(p)
    (q0,), st2 = adam_update(p, [np.zeros(2)], st_zero)
    assert np.array_equal(q0, p[0])
    assert np.all(np.abs(st1.m[0]) < np.abs(st0.m[0])) and np.all(st1.v[0] < st0.v[0])
    assert st2.step == 1 and st1.step == 4


def test_adam_first_step_magnitude():
    (q,), s = adam_update([np.array([0.0])], [np.array([1.0])], AdamState.zeros_like([np.zeros(1)], lr=1e-3))
    assert q[0] == pytest.approx(-1e-3, rel=1e-6)
    assert s.step == 1


def test_adam_symmetry():
    (q,), _ = adam_update([np.array([1.0, 1.0])], [np.array([0.3, 0.3])], AdamState.zeros_like([np.zeros(2)]))
    assert q[0] == q[1]


def test_adam_errors():
    s = AdamState.zeros_like([np.zeros(2)])
    with pytest.raises(ad.ShapeError):
        adam_update([np.zeros(2)], [np.zeros(3)], s)
    with pytest.raises(ad.NonFiniteError):
        adam_update([np.zeros(2)], [np.array([np.nan, 0.0])], s)


def test_adam_step_counter_increases():
    p, s = [np.ones(2)], AdamState.zeros_like([np.ones(2)])
    steps = []
    for _ in range(4):
        p, s = adam_update(p, [np.ones(2)], s)
        steps.append(s.step)
    assert steps == [1, 2, 3, 4]


# --- RNG -------------------------------------------------------------------------------


def test_rng_reproducible_and_split_independent():
    a = RngState(7).generator().standard_normal(5)
    b = RngState(7).generator().standard_normal(5)
    assert np.array_equal(a, b)
    kids = RngState(7).split(4)
    assert len({k.stream for k in kids} | {0}) == 5
    draws = [k.generator().standard_normal(3).tobytes() for k in kids]
    assert len(set(draws)) == 4
    assert RngState(7).child(2) == kids[2]
    assert not np.array_equal(RngState(8).generator().standard_normal(5), a)
