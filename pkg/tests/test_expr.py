import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entroscope.expr import (
    BOUND_INFLATION,
    FUNCTIONS,
    BinOp,
    Call,
    EvaluationError,
    ExpressionError,
    Neg,
    Num,
    Pow,
    Var,
    compile_expression,
    count_nodes,
    estimate_bound,
    make_test_function,
    parse_expression,
    to_source,
)
from entroscope.spaces import circle, euclidean, product

from support import EXPRESSIONS

PLANE, SPACE3 = euclidean(2), euclidean(3)


def test_sum_of_power_and_call():
    node = parse_expression("y1^2 + sin(y2)", PLANE)
    assert node == BinOp("+", Pow(Var("y1"), 2), Call("sin", (Var("y2"),)))
    # +, ^, y1, 2, sin, y2
    assert count_nodes(node) == 6


def test_directional_quotient_is_valid():
    node = parse_expression("(y1 - 0.5) / norm(y1, y2)", PLANE)
    assert isinstance(node, BinOp) and node.op == "/"
    f = compile_expression(node, PLANE)
    assert f(np.array([[3.5, 4.0]]))[0] == pytest.approx(3.0 / math.hypot(3.5, 4.0), rel=1e-15)


def test_unknown_variable_message():
    with pytest.raises(ExpressionError, match="^unknown variable y3 at 1:1$"):
        parse_expression("y3", PLANE)


@pytest.mark.parametrize("src, line, col", [
    ("y1 +", 1, 5),
    ("(y1", 1, 4),
    ("y1 $ y2", 1, 4),
    ("y1 +\n  * y2", 2, 3),
    ("sin(y1) y2", 1, 9),
    ("y1^y2", 1, 4),
    ("y1^1.5", 1, 4),
    ("", 1, 1),
    ("foo(y1)", 1, 1),
    ("sin + 1", 1, 1),
    ("y1(2)", 1, 1),
])
def test_syntax_errors_are_located(src, line, col):
    with pytest.raises(ExpressionError) as err:
        parse_expression(src, PLANE)
    assert (err.value.line, err.value.column) == (line, col)
    assert str(err.value).endswith(f"at {line}:{col}")


@pytest.mark.parametrize("src", ["sin(y1, y2)", "cos(y1, y1)", "atan(y1, 1, 2)"])
def test_arity_mismatch(src):
    with pytest.raises(ExpressionError, match="argument"):
        parse_expression(src, PLANE)


def test_theta_only_where_declared():
    parse_expression("sin(theta)", circle())
    parse_expression("theta + y1", product(euclidean(1), circle()))
    with pytest.raises(ExpressionError, match="unknown variable theta"):
        parse_expression("theta", PLANE)


def test_unary_minus_binds_to_base():
    # "-" applies to the base, so the square is taken after negation
    assert parse_expression("-y1^2") == Pow(Neg(Var("y1")), 2)
    assert parse_expression("0 - y1^2") == BinOp("-", Num(0.0), Pow(Var("y1"), 2))


def test_left_associativity():
    assert parse_expression("y1 - y2 - y3") == BinOp("-", BinOp("-", Var("y1"), Var("y2")), Var("y3"))
    assert to_source(parse_expression("y1 - (y2 - y3)")) == "y1 - (y2 - y3)"


def test_division_by_zero_is_located():
    f = compile_expression(parse_expression("1 / y1", PLANE), PLANE)
    with pytest.raises(EvaluationError, match=r"division by zero at 1:3 \(point \[0.0, 2.0\]\)"):
        f(np.array([[1.0, 1.0], [0.0, 2.0]]))


def test_zero_over_zero_is_zero():
    f = compile_expression(parse_expression("y1 / norm(y1, y2)", PLANE), PLANE)
    assert np.array_equal(f(np.array([[0.0, 0.0], [3.0, 4.0]])), [0.0, 0.6])


def test_sqrt_of_negative_is_located():
    f = compile_expression(parse_expression("2 + sqrt(y1)", PLANE), PLANE)
    with pytest.raises(EvaluationError, match="sqrt of negative value at 1:5"):
        f(np.array([[-1.0, 0.0]]))


def test_overflow_is_reported():
    f = compile_expression(parse_expression("exp(y1)", PLANE), PLANE, "exp(y1)")
    with pytest.raises(EvaluationError, match="non-finite"):
        f(np.array([[1000.0, 0.0]]))


def test_evaluation_matches_python():
    src = "sin(y1) * cos(y2) + atan(y3) - exp(0 - y1^2) / sqrt(1 + abs(y2))"
    f = compile_expression(parse_expression(src, SPACE3), SPACE3)
    y = np.random.default_rng(2).normal(size=(20, 3))
    expected = [math.sin(a) * math.cos(b) + math.atan(c) - math.exp(-a * a) / math.sqrt(1 + abs(b))
                for a, b, c in y]
    assert np.allclose(f(y), expected, rtol=1e-14, atol=1e-15)


def test_bump_support():
    f = compile_expression(parse_expression("bump(y1, y2)", PLANE), PLANE)
    vals = f(np.array([[0.0, 0.0], [0.6, 0.8], [2.0, 0.0]]))
    assert vals[0] == pytest.approx(math.exp(-1))
    assert vals[1] == 0.0 and vals[2] == 0.0


@pytest.mark.parametrize("src", EXPRESSIONS)
def test_round_trip_corpus(src):
    node = parse_expression(src, SPACE3)
    assert parse_expression(to_source(node), SPACE3) == node


def test_corpus_is_large_enough():
    assert len(EXPRESSIONS) >= 50


leaves = st.one_of(
    st.floats(0, 1e6, allow_nan=False, allow_infinity=False).map(Num),
    st.sampled_from(["y1", "y2", "y3"]).map(Var),
)


def _extend(children):
    unary = sorted(name for name, (lo, _, _) in FUNCTIONS.items() if lo == 1)
    return st.one_of(
        children.map(Neg),
        st.tuples(st.sampled_from("+-*/"), children, children).map(lambda t: BinOp(*t)),
        st.tuples(children, st.integers(0, 4)).map(lambda t: Pow(*t)),
        st.tuples(st.sampled_from(unary), children).map(lambda t: Call(t[0], (t[1],))),
        st.tuples(st.sampled_from(["norm", "bump"]), st.lists(children, min_size=1, max_size=3))
        .map(lambda t: Call(t[0], tuple(t[1]))),
    )


trees = st.recursive(leaves, _extend, max_leaves=12)


@settings(max_examples=200, deadline=None)
@given(trees)
def test_round_trip_random_trees(tree):
    src = to_source(tree)
    assert parse_expression(src, SPACE3) == tree
    assert to_source(parse_expression(src)) == src


def test_estimated_bound_uses_inflation():
    f = make_test_function("sin(y1) + 2", euclidean(1), box=([0.0], [math.pi]), extra_points=[[math.pi / 2]])
    assert f.bound_estimated
    assert f.bound == pytest.approx(BOUND_INFLATION * 3.0)
    assert BOUND_INFLATION == 1.25


def test_user_bound_is_not_estimated():
    f = make_test_function("y1", euclidean(1), 4.0)
    assert f.bound == 4.0 and not f.bound_estimated
    assert f.label == "y1"


def test_bound_or_region_required():
    with pytest.raises(ValueError):
        make_test_function("y1", euclidean(1))


def test_estimate_bound_of_zero_function_is_tiny_positive():
    assert 0 < estimate_bound(lambda y: np.zeros(y.shape[0]), ([0.0], [1.0])) < 1e-100
