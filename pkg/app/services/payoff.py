"""
Payoff expression parsing, evaluation and the builtin payoff families.

Grammar (whitespace-insensitive):

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := '-' factor | number | 'x' INT | fncall | '(' expr ')' ['^+']
    fncall := ('max' | 'min' | 'sum' | 'avg' | 'pos') '(' expr (',' expr)* ')'

'(e)^+' is sugar for pos(e).
"""
import re
from enum import Enum
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from app.core.exceptions import (
    DimensionMismatchError,
    InvalidArgumentError,
    PayoffArityError,
    PayoffBindingError,
    PayoffEvaluationError,
    PayoffSyntaxError,
)
from app.models.market import SampleBatch
from app.models.payoff import FUNCTIONS, BinOp, Call, Const, Neg, Node, PayoffExpr, Var, max_index, negate

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<var>x\d+)(?![A-Za-z_])
  | (?P<name>[A-Za-z_]+)
  | (?P<posfix>\^\+)
  | (?P<op>[-+*/(),])
    """,
    re.VERBOSE,
)


def _tokenize(text: str) -> List[Tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        match = _TOKEN.match(text, pos)
        if match is None:
            raise PayoffSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = match.lastgroup
        if kind != "ws":
            tokens.append((kind, match.group(), pos))
        pos = match.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    """Recursive-descent parser over the token list."""

    def __init__(self, text: str):
        self._tokens = _tokenize(text)
        self._i = 0

    def _peek(self) -> Tuple[str, str, int]:
        return self._tokens[self._i]

    def _next(self) -> Tuple[str, str, int]:
        token = self._tokens[self._i]
        self._i += 1
        return token

    def _expect(self, value: str) -> None:
        kind, text, offset = self._next()
        if text != value or kind == "end":
            found = "end of input" if kind == "end" else repr(text)
            raise PayoffSyntaxError(f"expected {value!r}, found {found}", offset)

    def parse(self) -> Node:
        node = self._expr()
        kind, text, offset = self._peek()
        if kind != "end":
            raise PayoffSyntaxError(f"unexpected {text!r}", offset)
        return node

    def _expr(self) -> Node:
        node = self._term()
        while self._peek()[1] in ("+", "-") and self._peek()[0] == "op":
            op = self._next()[1]
            node = BinOp(op, node, self._term())
        return node

    def _term(self) -> Node:
        node = self._factor()
        while self._peek()[1] in ("*", "/") and self._peek()[0] == "op":
            op = self._next()[1]
            node = BinOp(op, node, self._factor())
        return node

    def _factor(self) -> Node:
        kind, text, offset = self._next()
        if kind == "op" and text == "-":
            return negate(self._factor())
        if kind == "number":
            return Const(float(text))
        if kind == "var":
            return Var(int(text[1:]))
        if kind == "name":
            return self._call(text, offset)
        if kind == "op" and text == "(":
            inner = self._expr()
            self._expect(")")
            if self._peek()[0] == "posfix":
                self._next()
                return Call("pos", (inner,))
            return inner
        found = "end of input" if kind == "end" else repr(text)
        raise PayoffSyntaxError(f"unexpected {found}", offset)

    def _call(self, name: str, offset: int) -> Node:
        if name not in FUNCTIONS:
            raise PayoffSyntaxError(f"unknown function {name!r}", offset)
        self._expect("(")
        if self._peek()[1] == ")":
            raise PayoffArityError(f"{name} needs at least one argument", self._peek()[2])
        args = [self._expr()]
        while self._peek()[1] == ",":
            self._next()
            args.append(self._expr())
        self._expect(")")
        if name == "pos" and len(args) != 1:
            raise PayoffArityError(f"pos takes exactly one argument, got {len(args)}", offset)
        return Call(name, tuple(args))


def _bind(node: Node, dimension: int) -> None:
    if isinstance(node, Var):
        if not 1 <= node.index <= dimension:
            raise PayoffBindingError(f"variable x{node.index} outside x1..x{dimension}")
    elif isinstance(node, Neg):
        _bind(node.operand, dimension)
    elif isinstance(node, BinOp):
        _bind(node.left, dimension)
        _bind(node.right, dimension)
    elif isinstance(node, Call):
        for arg in node.args:
            _bind(arg, dimension)


def parse_payoff(text: str, d: int) -> PayoffExpr:
    """
    Parse payoff text and bind it to d assets.

    Raises:
        PayoffSyntaxError: On grammar violations (with character offset)
        PayoffArityError: On function arity violations
        PayoffBindingError: If a variable index is outside 1..d
    """
    if not text or not text.strip():
        raise PayoffSyntaxError("empty payoff expression", 0)
    if d < 1:
        raise InvalidArgumentError(f"dimension must be positive, got {d}")
    root = _Parser(text).parse()
    _bind(root, d)
    return PayoffExpr(root=root, dimension=d)


def _evaluate(node: Node, values: np.ndarray) -> np.ndarray:
    if isinstance(node, Var):
        return values[:, node.index - 1]
    if isinstance(node, Const):
        return np.full(values.shape[0], node.value)
    if isinstance(node, Neg):
        return -_evaluate(node.operand, values)
    if isinstance(node, BinOp):
        left = _evaluate(node.left, values)
        right = _evaluate(node.right, values)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        zeros = np.flatnonzero(right == 0.0)
        if zeros.size:
            raise PayoffEvaluationError("division by zero", int(zeros[0]))
        return left / right
    args = [_evaluate(a, values) for a in node.args]
    if node.func == "max":
        return np.maximum.reduce(args) if len(args) > 1 else args[0]
    if node.func == "min":
        return np.minimum.reduce(args) if len(args) > 1 else args[0]
    if node.func == "sum":
        return np.add.reduce(args) if len(args) > 1 else args[0]
    if node.func == "avg":
        return np.add.reduce(args) / len(args) if len(args) > 1 else args[0]
    return np.maximum(args[0], 0.0)


def eval_payoff(expr: PayoffExpr, batch: SampleBatch | np.ndarray) -> np.ndarray:
    """
    Evaluate a payoff on every row of a batch.

    Raises:
        DimensionMismatchError: If the batch width differs from the payoff dimension
        PayoffEvaluationError: On division by zero (first offending row)
    """
    values = batch.values if isinstance(batch, SampleBatch) else np.asarray(batch, dtype=float)
    if values.ndim != 2 or values.shape[1] != expr.dimension:
        raise DimensionMismatchError(
            f"payoff bound to {expr.dimension} assets evaluated on batch of shape {values.shape}"
        )
    return _evaluate(expr.root, values)


def eval_many(payoffs: Sequence[PayoffExpr], values: np.ndarray) -> np.ndarray:
    """Stack payoff evaluations into an (n, len(payoffs)) matrix."""
    if not payoffs:
        return np.zeros((values.shape[0], 0))
    return np.column_stack([eval_payoff(p, values) for p in payoffs])


class PayoffKind(str, Enum):
    CALL_ON_MAX = "call_on_max"
    CALL_ON_MIN = "call_on_min"
    PUT_ON_MIN = "put_on_min"
    BASKET_CALL = "basket_call"
    VANILLA_CALL = "vanilla_call"
    VANILLA_PUT = "vanilla_put"


def builtin(kind: PayoffKind | str, indices: Iterable[int], strike: float, dimension: int | None = None) -> PayoffExpr:
    """
    Construct a payoff of one of the standard families.

    The tree is identical to parsing the family's text form, e.g.
    call_on_max over {1, 2} with strike 6 equals "(max(x1, x2) - 6)^+".

    Raises:
        InvalidArgumentError: On an empty or invalid index set
    """
    kind = PayoffKind(kind)
    assets = sorted(set(int(i) for i in indices))
    if not assets:
        raise InvalidArgumentError("payoff needs at least one asset index")
    if assets[0] < 1:
        raise InvalidArgumentError(f"asset indices are 1-based, got {assets[0]}")
    dimension = dimension if dimension is not None else assets[-1]
    if assets[-1] > dimension:
        raise PayoffBindingError(f"variable x{assets[-1]} outside x1..x{dimension}")
    variables = tuple(Var(i) for i in assets)
    k = Const(float(strike))

    if kind in (PayoffKind.VANILLA_CALL, PayoffKind.VANILLA_PUT):
        if len(assets) != 1:
            raise InvalidArgumentError(f"{kind.value} takes exactly one asset, got {len(assets)}")
        underlying: Node = variables[0]
    elif kind == PayoffKind.CALL_ON_MAX:
        underlying = Call("max", variables)
    elif kind == PayoffKind.BASKET_CALL:
        underlying = Call("avg", variables)
    else:
        underlying = Call("min", variables)

    if kind in (PayoffKind.PUT_ON_MIN, PayoffKind.VANILLA_PUT):
        body = BinOp("-", k, underlying)
    else:
        body = BinOp("-", underlying, k)
    root = Call("pos", (body,))
    if max_index(root) > dimension:
        raise PayoffBindingError(f"payoff references x{max_index(root)} beyond dimension {dimension}")
    return PayoffExpr(root=root, dimension=dimension)
