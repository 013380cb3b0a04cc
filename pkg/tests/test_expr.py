import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from exitdpp.expr import (BinOp, Call, Compiled, EvaluationError, Num, ParseError, Var, evaluate,
                          parse, to_string, variables)


def test_grammar_reading():
    assert parse("1 - x1^2", 1) == BinOp("-", Num(1.0), BinOp("^", Var("x", 1), Num(2.0)))


def test_min_times_sin_parses():
    tree = parse("min(u1, 0) * sin(t)", 1, 1)
    assert tree == BinOp("*", Call("min", (Var("u", 1), Num(0.0))), Call("sin", (Var("t"),)))


def test_variable_index_out_of_range():
    with pytest.raises(ParseError, match="variable index out of range") as exc:
        parse("x2", 1)
    assert exc.value.offset == 0


@pytest.mark.parametrize("text, message", [
    ("y1", "unknown identifier"),
    ("foo(x1)", "unknown function"),
    ("sin(x1, x1)", "argument"),
    ("max(x1)", "argument"),
    ("1 +", "unexpected"),
    ("(1", "expected"),
    ("1 $ 2", "unexpected character"),
    ("u1", "variable index out of range"),
])
def test_parse_errors_are_located(text, message):
    with pytest.raises(ParseError, match=message) as exc:
        parse(text, 1, 0)
    assert exc.value.offset is None or 0 <= exc.value.offset <= len(text)


def test_arithmetic():
    assert evaluate(parse("1 - x1^2", 1), 0.0, [0.5]) == 0.75


def test_sign_of_zero_is_zero():
    assert evaluate(parse("sign(x1)", 1), 0.0, [0.0]) == 0.0


def test_zero_to_the_zero_is_one():
    assert evaluate(parse("x1^0", 1), 0.0, [0.0]) == 1.0


@pytest.mark.parametrize("text, x", [("1/x1", 0.0), ("log(x1)", 0.0), ("log(x1)", -1.0),
                                     ("sqrt(x1)", -1.0), ("x1^(-1)", 0.0)])
def test_evaluation_errors(text, x):
    with pytest.raises(EvaluationError):
        evaluate(parse(text, 1), 0.0, [x])


def test_evaluation_error_names_subexpression():
    with pytest.raises(EvaluationError, match="x1"):
        evaluate(parse("2 + 1/x1", 1), 0.0, [0.0])


def test_precedence_and_associativity():
    e = lambda s: evaluate(parse(s, 2, 1), 0.5, [2.0, 3.0], [4.0])  # noqa: E731
    assert e("2^3^2") == 512.0
    assert e("-x1^2") == -4.0
    assert e("x1 - x2 - u1") == -5.0
    assert e("x2 / x1 / 2") == 0.75
    assert e("max(t, x1, x2) + min(u1, -1)") == 2.0
    assert e("abs(-x2) * tanh(0) + exp(0) + cos(0)") == 2.0


def test_batched_matches_scalar():
    c = Compiled("sin(x1) * x2 + t * u1", 2, 1)
    X = np.array([[0.1, 0.2], [0.3, -0.4], [2.0, 1.0]])
    U = np.array([[1.0], [2.0], [-1.0]])
    batched = c(0.7, X, U)
    assert batched.shape == (3,)
    for i in range(3):
        assert batched[i] == c(0.7, X[i], U[i])


def test_variables_and_dependence_flags():
    c = Compiled("t + x2 * u1", 2, 1)
    assert variables(c.tree) == {("t", 0), ("x", 2), ("u", 1)}
    assert c.uses_t and c.uses_x and c.uses_u
    assert not Compiled("x1", 1).uses_t


# ---------------------------------------------------------------- properties

leaves = st.one_of(
    st.floats(0, 100, allow_nan=False).map(lambda v: f"{v!r}"),
    st.sampled_from(["t", "x1", "x2", "u1"]),
)


def _combine(children):
    return st.one_of(
        st.tuples(children, st.sampled_from("+-*"), children).map(lambda p: f"({p[0]} {p[1]} {p[2]})"),
        children.map(lambda c: f"-{c}"),
        st.tuples(st.sampled_from(["sin", "cos", "tanh", "abs", "sign"]), children).map(
            lambda p: f"{p[0]}({p[1]})"),
        st.tuples(st.sampled_from(["min", "max"]), children, children).map(
            lambda p: f"{p[0]}({p[1]}, {p[2]})"),
    )


exprs = st.recursive(leaves, _combine, max_leaves=12)


@given(exprs)
def test_printing_round_trips(text):
    tree = parse(text, 2, 1)
    assert parse(to_string(tree), 2, 1) == tree


def _python(text, t, x1, x2, u1):
    env = {"t": t, "x1": x1, "x2": x2, "u1": u1, "sin": math.sin, "cos": math.cos,
           "tanh": math.tanh, "abs": abs, "min": min, "max": max,
           "sign": lambda v: float((v > 0) - (v < 0))}
    return eval(text, {"__builtins__": {}}, env)


@given(exprs, st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_evaluation_matches_python(text, t, x1, x2, u1):
    ref = _python(text, t, x1, x2, u1)
    got = evaluate(parse(text, 2, 1), t, [x1, x2], [u1])
    assert got == pytest.approx(ref, rel=1e-12, abs=1e-12) or (math.isinf(ref) and got == ref)


@given(exprs, st.floats(-3, 3), st.floats(-3, 3))
def test_evaluation_is_pure(text, x1, x2):
    tree = parse(text, 2, 1)
    a = evaluate(tree, 0.25, [x1, x2], [0.5])
    b = evaluate(tree, 0.25, [x1, x2], [0.5])
    assert a == b or (math.isnan(a) and math.isnan(b))


@given(st.lists(st.sampled_from(["x1", "2", "+", "-", "*", "/", "^", "(", ")", ",", "sin", "max",
                                 "t", "u1", "1.5e3", "foo", "$"]), max_size=14))
def test_parser_is_total(tokens):
    text = " ".join(tokens)
    try:
        parse(text, 1, 1)
    except ParseError as exc:
        assert exc.offset is None or 0 <= exc.offset <= len(text)


@given(st.sampled_from(["x1", "x2", "t", "u1", "3.0"]), st.sampled_from(["x1", "x2", "t", "u1", "2.0"]),
       st.sampled_from(["x1", "x2", "t", "u1", "0.5"]))
def test_product_binds_tighter_than_sum(a, b, c):
    assert parse(f"{a}+{b}*{c}", 2, 1) == parse(f"{a}+({b}*{c})", 2, 1)
