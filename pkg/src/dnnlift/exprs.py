"""Symbolic expression trees over tagged memory cells.

A constraint relates one output memory cell to the input/parameter cells it
was computed from.  Leaves are either concrete addressed cells or float
constants; interior nodes are the small FP operator set observed in the
modeled instruction vocabulary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

# Interior node operators.  add/mul become n-ary after simplification.
_BINOPS = {"add", "sub", "mul", "div", "max", "min"}
_UNOPS = {"sqrt", "neg", "exp"}


@dataclass(frozen=True)
class Cell:
    addr: int
    width: int = 4


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class App:
    op: str
    args: tuple

    def __post_init__(self):
        assert self.op in _BINOPS or self.op in _UNOPS, self.op


Expr = object  # Cell | Const | App


def app(op: str, *args) -> App:
    return App(op, tuple(args))


def _rebuild(expr, leaf_fn, app_fn):
    """Iterative post-order rewrite; constraint trees nest thousands deep."""
    done: dict[int, object] = {}
    stack = [(expr, False)]
    while stack:
        node, visited = stack.pop()
        if id(node) in done:
            continue
        if not isinstance(node, App):
            done[id(node)] = leaf_fn(node)
        elif visited:
            done[id(node)] = app_fn(node.op, tuple(done[id(a)] for a in node.args))
        else:
            stack.append((node, True))
            stack.extend((a, False) for a in node.args if id(a) not in done)
    return done[id(expr)]


def _eval_app(op: str, args: tuple) -> float:
    if op == "add":
        return math.fsum(args) if len(args) > 2 else sum(args)
    if op == "sub":
        return args[0] - args[1]
    if op == "mul":
        r = 1.0
        for a in args:
            r *= a
        return r
    if op == "div":
        return args[0] / args[1]
    if op == "max":
        return max(args)
    if op == "min":
        return min(args)
    if op == "sqrt":
        return math.sqrt(args[0])
    if op == "neg":
        return -args[0]
    if op == "exp":
        return math.exp(args[0])
    raise AssertionError(op)


def evaluate(expr, read_cell) -> float:
    """Evaluate in float64; leaf cells are resolved through ``read_cell``."""
    def leaf(e):
        return float(e.value) if isinstance(e, Const) else float(read_cell(e.addr))
    return _rebuild(expr, leaf, _eval_app)


def cells_in_order(expr) -> list[Cell]:
    """Distinct leaf cells in first-use (left-to-right construction) order."""
    seen = {}
    stack = [expr]
    while stack:
        e = stack.pop()
        if isinstance(e, Cell):
            if e.addr not in seen:
                seen[e.addr] = e
        elif isinstance(e, App):
            stack.extend(reversed(e.args))
    return list(seen.values())


def count_op(expr, op: str) -> int:
    n = 0
    stack = [expr]
    while stack:
        e = stack.pop()
        if isinstance(e, App):
            if e.op == op:
                n += 1
            stack.extend(e.args)
    return n


def contains_op(expr, op: str) -> bool:
    return count_op(expr, op) > 0


def substitute(expr, mapping):
    """Replace cells via ``mapping`` (addr -> replacement expr)."""
    def leaf(e):
        return mapping.get(e.addr, e) if isinstance(e, Cell) else e
    return _rebuild(expr, leaf, App)


def _is_zero(e) -> bool:
    return isinstance(e, Const) and e.value == 0.0


def _is_one(e) -> bool:
    return isinstance(e, Const) and e.value == 1.0


def simplify(expr):
    """Normalize to flattened n-ary sums/products without reordering terms.

    Identities applied: x+0 -> x, x*1 -> x, x*0 -> 0, --x -> x,
    0-x -> -x, max(max(x,c),c) -> max(x,c), constant folding of all-const
    nodes.  Term order stays first-compute order; concrete evaluation is
    preserved.
    """
    return _rebuild(expr, lambda e: e, _simplify_app)


def _simplify_app(op: str, args: tuple):
    if op in ("add", "mul"):
        flat = []
        for a in args:
            if isinstance(a, App) and a.op == op:
                flat.extend(a.args)
            else:
                flat.append(a)
        if op == "add":
            flat = [a for a in flat if not _is_zero(a)]
            if not flat:
                return Const(0.0)
        else:
            if any(_is_zero(a) for a in flat):
                return Const(0.0)
            flat = [a for a in flat if not _is_one(a)]
            if not flat:
                return Const(1.0)
        if len(flat) == 1:
            return flat[0]
        if all(isinstance(a, Const) for a in flat):
            return Const(_eval_app(op, tuple(c.value for c in flat)))
        return App(op, tuple(flat))

    if op == "sub":
        a, b = args
        if _is_zero(b):
            return a
        if _is_zero(a):
            return _simplify_app("neg", (b,))
        if isinstance(a, Const) and isinstance(b, Const):
            return Const(a.value - b.value)
        return App(op, (a, b))

    if op == "div":
        a, b = args
        if _is_one(b):
            return a
        if isinstance(a, Const) and isinstance(b, Const):
            return Const(a.value / b.value)
        return App(op, (a, b))

    if op == "neg":
        (a,) = args
        if isinstance(a, App) and a.op == "neg":
            return a.args[0]
        if isinstance(a, Const):
            return Const(-a.value)
        return App(op, (a,))

    if op in ("max", "min"):
        a, b = args
        if isinstance(a, App) and a.op == op and a.args[1] == b:
            return a  # idempotent re-clamp against the same bound
        if isinstance(a, Const) and isinstance(b, Const):
            return Const(max(a.value, b.value) if op == "max" else min(a.value, b.value))
        return App(op, (a, b))

    if all(isinstance(a, Const) for a in args):
        return Const(_eval_app(op, tuple(c.value for c in args)))
    return App(op, tuple(args))


def render(expr, name_cell=None) -> str:
    """Human-readable constraint text.

    ``name_cell`` maps a Cell to a display name; defaults to ``(0xADDR, w)``.
    """
    if name_cell is None:
        name_cell = lambda c: f"(0x{c.addr:x}, {c.width})"

    def go(e, parent_op=None):
        if isinstance(e, Cell):
            return name_cell(e)
        if isinstance(e, Const):
            return f"{e.value:g}"
        if e.op == "add":
            s = " + ".join(go(a, "add") for a in e.args)
            return f"({s})" if parent_op in ("mul", "div", "sub", "neg") else s
        if e.op == "mul":
            return " * ".join(go(a, "mul") for a in e.args)
        if e.op == "sub":
            return f"({go(e.args[0], 'sub')} - {go(e.args[1], 'sub')})"
        if e.op == "div":
            return f"({go(e.args[0], 'div')} / {go(e.args[1], 'div')})"
        if e.op in ("max", "min"):
            return f"{e.op}({go(e.args[0])}, {go(e.args[1])})"
        return f"{e.op}({go(e.args[0])})"

    return go(expr)
