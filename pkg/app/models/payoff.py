"""
Payoff expression trees.

Nodes are immutable; structural equality is dataclass equality. Asset variables
use 1-based indices as in the payoff texts (x1..xd).
"""
from dataclasses import dataclass
from typing import Tuple, Union

FUNCTIONS = ("max", "min", "sum", "avg", "pos")


@dataclass(frozen=True)
class Var:
    index: int


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    args: Tuple["Node", ...]


Node = Union[Var, Const, Neg, BinOp, Call]

_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}
_UNARY = 3
_ATOM = 4


def _precedence(node: Node) -> int:
    if isinstance(node, BinOp):
        return _PRECEDENCE[node.op]
    if isinstance(node, Neg):
        return _UNARY
    if isinstance(node, Const) and node.value < 0:
        return _UNARY
    return _ATOM


def format_number(value: float) -> str:
    """Shortest '.'-decimal text that parses back to ``value``."""
    value = float(value)
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def render(node: Node) -> str:
    """Canonical text with the minimal parentheses that preserve the tree."""
    if isinstance(node, Var):
        return f"x{node.index}"
    if isinstance(node, Const):
        return format_number(node.value)
    if isinstance(node, Neg):
        inner = render(node.operand)
        if _precedence(node.operand) < _UNARY:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, Call):
        if node.func == "pos":
            return f"({render(node.args[0])})^+"
        return f"{node.func}({', '.join(render(a) for a in node.args)})"
    prec = _PRECEDENCE[node.op]
    left = render(node.left)
    if _precedence(node.left) < prec:
        left = f"({left})"
    right = render(node.right)
    if _precedence(node.right) <= prec:
        right = f"({right})"
    return f"{left} {node.op} {right}"


def max_index(node: Node) -> int:
    """Largest asset index referenced (0 for asset-free expressions)."""
    if isinstance(node, Var):
        return node.index
    if isinstance(node, Const):
        return 0
    if isinstance(node, Neg):
        return max_index(node.operand)
    if isinstance(node, BinOp):
        return max(max_index(node.left), max_index(node.right))
    return max(max_index(a) for a in node.args)


def negate(node: Node) -> Node:
    """Negation that folds constants and double negation."""
    if isinstance(node, Const):
        return Const(-node.value)
    if isinstance(node, Neg):
        return node.operand
    return Neg(node)


@dataclass(frozen=True)
class PayoffExpr:
    """A payoff tree bound to an asset dimension."""

    root: Node
    dimension: int

    @property
    def text(self) -> str:
        return render(self.root)

    def negated(self) -> "PayoffExpr":
        return PayoffExpr(negate(self.root), self.dimension)

    def __str__(self) -> str:
        return self.text
