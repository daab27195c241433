import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scl import expr as ex

SMOOTH_UNARY = ("exp", "sin", "cos", "tanh", "sech")


def trees(max_leaves=8):
    leaf = st.one_of(
        st.sampled_from([ex.Var("t"), ex.Var("y")]),
        # the parser only produces non-negative literals; signs are Neg nodes
        st.floats(0, 3, allow_nan=False).map(lambda v: ex.Num(round(v, 3))),
    )

    def extend(children):
        return st.one_of(
            st.tuples(st.sampled_from("+-*"), children, children).map(lambda a: ex.BinOp(*a)),
            st.tuples(st.sampled_from(SMOOTH_UNARY), children).map(lambda a: ex.Call(a[0], (a[1],))),
            children.map(ex.Neg),
        )

    return st.recursive(leaf, extend, max_leaves=max_leaves)


@settings(max_examples=300, deadline=None)
@given(trees())
def test_print_parse_round_trip(node):
    assert ex.parse(ex.to_text(node)) == node


@settings(max_examples=200, deadline=None)
@given(trees())
def test_text_is_a_fixed_point(node):
    text = ex.to_text(node)
    assert ex.to_text(ex.parse(text)) == text


def _fd(f, var, t, y, h=1e-4):
    def at(k):
        return f(t + k * h, y) if var == "t" else f(t, y + k * h)
    return (at(-2) - 8 * at(-1) + 8 * at(1) - at(2)) / (12 * h)


@settings(max_examples=400, deadline=None)
@given(trees(6), st.floats(-1, 1), st.floats(-1, 1), st.sampled_from("ty"))
def test_derivative_matches_finite_difference(node, t, y, var):
    f = ex.to_python(node)
    try:
        d = ex.to_python(ex.differentiate(node, var))(t, y)
        fd = _fd(f, var, t, y)
    except (OverflowError, ValueError):
        return
    if not (math.isfinite(d) and math.isfinite(fd)) or abs(fd) > 1e6:
        return
    assert abs(d - fd) <= 1e-6 * max(1.0, abs(fd)) + 1e-9 * max(1.0, abs(f(t, y)))


@pytest.mark.parametrize("text,t,y,value", [
    ("1 + 2 * 3", 0, 0, 7.0),
    ("2 ^ 3 ^ 2", 0, 0, 512.0),
    ("-2 ^ 2", 0, 0, -4.0),
    ("(-2) ^ 2", 0, 0, 4.0),
    ("8 / 4 / 2", 0, 0, 1.0),
    ("1 - 2 - 3", 0, 0, -4.0),
    ("clamp(y, -1, 1)", 0, 5, 1.0),
    ("ifle(t, y, 1, 2)", 1, 2, 1.0),
    ("ifle(t, y, 1, 2)", 3, 2, 2.0),
    ("max(-(2 + tanh(y + 1)), min(2 - tanh(y - 1), y))", 0, 0, 0.0),
    ("sech(0) + abs(-y)", 0, -2, 3.0),
    ("1e-3 * 2.5E2", 0, 0, 0.25),
])
def test_evaluate_known_values(text, t, y, value):
    assert ex.evaluate(ex.parse(text), t, y) == pytest.approx(value, abs=1e-15)


@pytest.mark.parametrize("text", ["", "1 +", "foo(y)", "exp(1, 2)", "(y", "y)", "2 $ 3", "min(y)",
                                  "t y"])
def test_syntax_errors(text):
    with pytest.raises(ex.ExprSyntaxError):
        ex.parse(text)


def test_incomplete_product_fails_at_offset_two():
    with pytest.raises(ex.ExprSyntaxError) as info:
        ex.parse("y*")
    assert info.value.offset == 2
    assert "number" in info.value.expected


def test_unknown_identifier_is_named():
    with pytest.raises(ex.ExprSyntaxError, match="unknown identifier 'c'"):
        ex.parse("exp(-c*t)")


def test_error_position_has_line_and_column():
    with pytest.raises(ex.ExprSyntaxError) as info:
        ex.parse("1 +\n * 2")
    assert (info.value.offset, info.value.line, info.value.column) == (5, 2, 2)


def test_ast_shape():
    assert ex.parse("2 + tanh(y+1)") == ex.BinOp(
        "+", ex.Num(2.0), ex.Call("tanh", (ex.BinOp("+", ex.Var("y"), ex.Num(1.0)),)))


def test_reference_values():
    assert ex.evaluate(ex.parse("y"), 0.3, 3.5) == 3.5
    assert ex.evaluate(ex.parse("tanh(y+1)"), 0.0, 0.0) == 0.7615941559557649
    d = ex.differentiate(ex.parse("2-tanh(y-1)"), "y")
    assert ex.evaluate(d, 0.0, 1.0) == -1.0
    d2 = ex.differentiate(ex.parse("y^2"), "y")
    assert all(ex.evaluate(d2, 0, v) == pytest.approx(2 * v) for v in (-1.5, 0.0, 2.25))


@pytest.mark.parametrize("text,t,y", [("log(y)", 0, -1), ("sqrt(y)", 0, -1), ("1 / y", 0, 0)])
def test_domain_errors(text, t, y):
    with pytest.raises(ex.ExprDomainError):
        ex.evaluate(ex.parse(text), t, y)


def test_symbolic_derivative_forms():
    d = ex.differentiate(ex.parse("tanh(y + 1)"), "y")
    assert ex.evaluate(d, 0, -1) == pytest.approx(1.0)
    assert ex.differentiate(ex.parse("t * 3"), "y") == ex.Num(0.0)
    assert ex.depends_on(ex.parse("exp(t) + 1"), "t")
    assert not ex.depends_on(ex.parse("exp(y) + 1"), "t")


def test_piecewise_derivative_takes_left_branch_on_ties():
    assert ex.evaluate(ex.differentiate(ex.parse("abs(y)"), "y"), 0, 0) == -1.0
    assert ex.evaluate(ex.differentiate(ex.parse("max(y, 2 * y)"), "y"), 0, 0) == 1.0
    assert ex.evaluate(ex.differentiate(ex.parse("min(2 * y, y)"), "y"), 0, 0) == 2.0


def test_printed_derivative_reparses():
    d = ex.differentiate(ex.parse("max(-(2 + tanh(y + 1)), min(2 - tanh(y - 1), y))"), "y")
    assert ex.parse(ex.to_text(d)) == d


def test_substitute():
    node = ex.substitute(ex.parse("t * y + t"), t=2.0)
    assert not ex.depends_on(node, "t")
    assert ex.evaluate(node, 99.0, 3.0) == 8.0


@pytest.mark.parametrize("text", ["2 + tanh(y + 1)", "max(-(2 + tanh(y + 1)), min(2 - tanh(y - 1), y))",
                                  "exp(-t) * sin(y) ^ 2", "clamp(2 * y, -1, 1)", "sqrt(1 + y ^ 2)"])
def test_compiled_forms_agree(text):
    node = ex.parse(text)
    t = np.linspace(0, 1, 7)
    y = np.linspace(-3, 3, 7)
    vec = ex.to_numpy(node)(t, y)
    scal = np.array([ex.to_python(node)(a, b) for a, b in zip(t, y)])
    jit = np.array([ex.to_njit(node)(a, b) for a, b in zip(t, y)])
    ref = np.array([ex.evaluate(node, a, b) for a, b in zip(t, y)])
    np.testing.assert_array_equal(scal, ref)
    np.testing.assert_allclose(vec, ref, rtol=1e-15, atol=1e-15)
    np.testing.assert_allclose(jit, ref, rtol=1e-15, atol=1e-15)


def test_numpy_form_broadcasts_constants():
    out = ex.to_numpy(ex.parse("3"))(np.zeros(4), np.zeros(4))
    assert out.shape == (4,) and np.all(out == 3.0)
