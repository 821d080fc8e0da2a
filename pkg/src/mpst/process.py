"""Endpoint processes: a small typed language for implementing one role.

A process mirrors the shape of a local type (send, receive with label
dispatch, internal choice with guarded cases, loops and jumps) and embeds a
first-order expression language for payload computations plus named hooks
into external code (read, write, interact).  Typing synthesises the unique
local type a process implements; :func:`check_conformance` closes the loop
by comparing that type with the projection of a global protocol and by
embedding the process's bounded traces in the protocol's traces.

Internal actions (conditionals, choice resolution, external calls) do not
appear in traces: the step relation first drives the head of the process to
a communication by evaluating them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Union

from .semantics import Action, RECV, SEND, Trace, recv_action, send_action
from .types import (
    BOOL,
    Base,
    INT,
    INT_MAX,
    INT_MIN,
    LEND,
    LEnd,
    LRec,
    LRecv,
    LSend,
    LVar,
    Label,
    LocalTree,
    LocalType,
    NAT,
    NAT_MAX,
    Pair,
    Role,
    Seq,
    Sort,
    Sum,
    UNIT,
    format_sort,
    l_max_free_index,
    l_shift,
    l_subst,
    local_tree_expand,
    validate_local,
)


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Expr:
    pass


@dataclass(frozen=True)
class Lit(Expr):
    value: object
    sort: Sort


@dataclass(frozen=True)
class VarRef(Expr):
    name: str


@dataclass(frozen=True)
class Arith(Expr):
    op: str  # + - * /
    lhs: Expr
    rhs: Expr


@dataclass(frozen=True)
class Cmp(Expr):
    op: str  # == != < <= > >=
    lhs: Expr
    rhs: Expr


@dataclass(frozen=True)
class PairE(Expr):
    first: Expr
    second: Expr


@dataclass(frozen=True)
class InlE(Expr):
    value: Expr
    right: Sort  # sort of the absent right alternative


@dataclass(frozen=True)
class InrE(Expr):
    value: Expr
    left: Sort


@dataclass(frozen=True)
class ExternRef(Expr):
    """A named external value supplier (a unit-argument host function)."""

    name: str


# ---------------------------------------------------------------------------
# Processes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Proc:
    pass


@dataclass(frozen=True)
class Finish(Proc):
    pass


@dataclass(frozen=True)
class Jump(Proc):
    index: int  # de Bruijn: 0 is the innermost enclosing loop


@dataclass(frozen=True)
class Loop(Proc):
    body: Proc


@dataclass(frozen=True)
class RecvAlt:
    label: Label
    var: str
    sort: Sort
    cont: Proc


@dataclass(frozen=True)
class Recv(Proc):
    peer: Role
    alts: tuple[RecvAlt, ...]


@dataclass(frozen=True)
class Send(Proc):
    peer: Role
    label: Label
    payload: Expr
    cont: Proc


@dataclass(frozen=True)
class SelectAlt:
    pass


@dataclass(frozen=True)
class Case(SelectAlt):
    guard: Expr
    label: Label
    payload: Expr
    sort: Sort
    cont: Proc


@dataclass(frozen=True)
class Default(SelectAlt):
    label: Label
    payload: Expr
    sort: Sort
    cont: Proc


@dataclass(frozen=True)
class Skip(SelectAlt):
    """A declared but unimplemented alternative.

    Carries the local type the alternative would have had, so the full
    branch list of the synthesised send type is still determined.  Never
    executes.
    """

    label: Label
    sort: Sort
    cont_type: LocalType


@dataclass(frozen=True)
class Select(Proc):
    peer: Role
    alts: tuple[SelectAlt, ...]


@dataclass(frozen=True)
class If(Proc):
    cond: Expr
    then_branch: Proc
    else_branch: Proc


@dataclass(frozen=True)
class Read(Proc):
    fn: str
    var: str
    sort: Sort
    cont: Proc


@dataclass(frozen=True)
class Write(Proc):
    fn: str
    payload: Expr
    cont: Proc


@dataclass(frozen=True)
class Interact(Proc):
    fn: str
    arg: Expr
    var: str
    sort: Sort
    cont: Proc


FINISH = Finish()


# ---------------------------------------------------------------------------
# Value-carrying actions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValueAction:
    dir: str
    subj: Role
    other: Role
    label: Label
    value: object
    sort: Sort

    def pretty(self) -> str:
        return f"{self.dir}{self.subj}{self.other}({self.label},{self.value!r})"


ValueTrace = tuple[ValueAction, ...]


def erase(a: ValueAction) -> Action:
    """Forget the payload value, keep its sort."""
    return Action(a.dir, a.subj, a.other, a.label, a.sort)


def erase_trace(t: ValueTrace) -> Trace:
    return tuple(erase(a) for a in t)


# ---------------------------------------------------------------------------
# Errors and contexts
# ---------------------------------------------------------------------------

class TypingError(Exception):
    """A process does not synthesise a local type.

    ``kind``: UnboundVariable, SortMismatch, UnknownExtern, DuplicateLabel,
    MissingDefault, MultipleDefaults, DefaultBeforeCase, BranchTypeMismatch,
    ExternSignatureMismatch, JumpOutOfScope, BadSkipType.  ``rule`` names the
    typing rule whose premise failed.
    """

    def __init__(self, kind: str, rule: str, message: str):
        super().__init__(f"{kind} [{rule}]: {message}")
        self.kind = kind
        self.rule = rule


class EvaluationError(Exception):
    pass


ExternSig = tuple[Sort, Sort]  # argument sort, result sort (unit = absent)


@dataclass(frozen=True)
class TypingCtx:
    vars: tuple[tuple[str, Sort], ...] = ()
    externs: tuple[tuple[str, ExternSig], ...] = ()

    @staticmethod
    def of(vars: Optional[Mapping[str, Sort]] = None,
           externs: Optional[Mapping[str, ExternSig]] = None) -> "TypingCtx":
        return TypingCtx(tuple(sorted((vars or {}).items())),
                         tuple(sorted((externs or {}).items())))

    def bind(self, name: str, sort: Sort) -> "TypingCtx":
        rest = tuple((n, s) for n, s in self.vars if n != name)
        return TypingCtx(tuple(sorted(rest + ((name, sort),))), self.externs)

    def lookup(self, name: str) -> Optional[Sort]:
        for n, s in self.vars:
            if n == name:
                return s
        return None

    def extern(self, name: str) -> Optional[ExternSig]:
        for n, sig in self.externs:
            if n == name:
                return sig
        return None


class StubRegistry(dict):
    """Pure host-function stubs for offline evaluation and trace enumeration.

    Trace enumeration replays processes many times, so the callables in here
    must be deterministic and side-effect free; the live runtime uses plain
    mappings instead.
    """


EMPTY_STUBS = StubRegistry()


# ---------------------------------------------------------------------------
# Expression typing and evaluation
# ---------------------------------------------------------------------------

_NUMERIC = (NAT, INT)


def typecheck_expr(ctx: TypingCtx, e: Expr) -> Sort:
    match e:
        case Lit(value, sort):
            if not value_fits(value, sort):
                raise TypingError("SortMismatch", "p-ty-send", f"literal {value!r} is not a {format_sort(sort)}")
            return sort
        case VarRef(name):
            sort = ctx.lookup(name)
            if sort is None:
                raise TypingError("UnboundVariable", "p-ty-send", f"variable {name!r} is not bound")
            return sort
        case Arith(op, lhs, rhs):
            a, b = typecheck_expr(ctx, lhs), typecheck_expr(ctx, rhs)
            if a != b or a not in _NUMERIC:
                raise TypingError("SortMismatch", "p-ty-send",
                                  f"arithmetic {op} needs matching numeric operands, got {format_sort(a)} and {format_sort(b)}")
            return a
        case Cmp(op, lhs, rhs):
            a, b = typecheck_expr(ctx, lhs), typecheck_expr(ctx, rhs)
            if a != b or a not in _NUMERIC:
                raise TypingError("SortMismatch", "p-ty-send",
                                  f"comparison {op} needs matching numeric operands, got {format_sort(a)} and {format_sort(b)}")
            return BOOL
        case PairE(first, second):
            return Pair(typecheck_expr(ctx, first), typecheck_expr(ctx, second))
        case InlE(value, right):
            return Sum(typecheck_expr(ctx, value), right)
        case InrE(value, left):
            return Sum(left, typecheck_expr(ctx, value))
        case ExternRef(name):
            sig = ctx.extern(name)
            if sig is None:
                raise TypingError("UnknownExtern", "p-ty-read", f"external function {name!r} is not declared")
            arg, result = sig
            if arg != UNIT:
                raise TypingError("ExternSignatureMismatch", "p-ty-read",
                                  f"{name!r} takes {format_sort(arg)}, not unit")
            return result
    raise TypeError(f"not an expression: {e!r}")


def value_fits(v: object, s: Sort) -> bool:
    match s:
        case Base("nat"):
            return isinstance(v, int) and not isinstance(v, bool) and 0 <= v <= NAT_MAX
        case Base("int"):
            return isinstance(v, int) and not isinstance(v, bool) and INT_MIN <= v <= INT_MAX
        case Base("bool"):
            return isinstance(v, bool)
        case Base("unit"):
            return v == ()
        case Pair(a, b):
            return (isinstance(v, tuple) and len(v) == 2
                    and value_fits(v[0], a) and value_fits(v[1], b))
        case Sum(a, b):
            if not (isinstance(v, tuple) and len(v) == 2 and v[0] in ("inl", "inr")):
                return False
            return value_fits(v[1], a) if v[0] == "inl" else value_fits(v[1], b)
        case Seq(elem):
            return isinstance(v, tuple) and all(value_fits(x, elem) for x in v) and (len(v) != 2 or True)
    return False


def _check_range(v: int, sort: Sort) -> int:
    if sort == NAT and not 0 <= v <= NAT_MAX:
        raise EvaluationError(f"nat out of range: {v}")
    if sort == INT and not INT_MIN <= v <= INT_MAX:
        raise EvaluationError(f"int out of range: {v}")
    return v


def eval_expr(e: Expr, registry: Optional[Mapping[str, Callable]] = None) -> tuple[object, Sort]:
    """Evaluate a closed expression to a value and its sort."""
    match e:
        case Lit(value, sort):
            return value, sort
        case VarRef(name):
            raise EvaluationError(f"unbound variable {name!r} at evaluation time")
        case Arith(op, lhs, rhs):
            a, sort = eval_expr(lhs, registry)
            b, _ = eval_expr(rhs, registry)
            assert isinstance(a, int) and isinstance(b, int)
            if op == "+":
                v = a + b
            elif op == "-":
                v = a - b
                if sort == NAT and v < 0:
                    v = 0  # natural subtraction truncates at zero
            elif op == "*":
                v = a * b
            elif op == "/":
                if b == 0:
                    raise EvaluationError("division by zero")
                v = a // b
            else:
                raise EvaluationError(f"unknown operator {op!r}")
            return _check_range(v, sort), sort
        case Cmp(op, lhs, rhs):
            a, _ = eval_expr(lhs, registry)
            b, _ = eval_expr(rhs, registry)
            table = {
                "==": a == b, "!=": a != b,
                "<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b,
            }
            return table[op], BOOL
        case PairE(first, second):
            v1, s1 = eval_expr(first, registry)
            v2, s2 = eval_expr(second, registry)
            return (v1, v2), Pair(s1, s2)
        case InlE(value, right):
            v, s = eval_expr(value, registry)
            return ("inl", v), Sum(s, right)
        case InrE(value, left):
            v, s = eval_expr(value, registry)
            return ("inr", v), Sum(left, s)
        case ExternRef(name):
            if registry is None or name not in registry:
                raise EvaluationError(f"external function {name!r} is not registered")
            v = registry[name]()
            return v, _sort_of_value(v)
    raise TypeError(f"not an expression: {e!r}")


def _sort_of_value(v: object) -> Sort:
    # Best-effort sort for extern results; callers validate against declared
    # signatures where those are known.
    if isinstance(v, bool):
        return BOOL
    if isinstance(v, int):
        return NAT if v >= 0 else INT
    if v == ():
        return UNIT
    raise EvaluationError(f"cannot infer the sort of {v!r}")


# ---------------------------------------------------------------------------
# Process typing
# ---------------------------------------------------------------------------

def typecheck_proc(ctx: TypingCtx, p: Proc) -> LocalType:
    """Synthesise the unique local type of ``p`` (a function of the input)."""
    return _synth(ctx, p, 0)


def _synth(ctx: TypingCtx, p: Proc, depth: int) -> LocalType:
    match p:
        case Finish():
            return LEND
        case Jump(i):
            if not 0 <= i < depth:
                raise TypingError("JumpOutOfScope", "p-ty-jump", f"jump {i} under {depth} loops")
            return LVar(i)
        case Loop(body):
            return LRec(_synth(ctx, body, depth + 1))
        case Recv(peer, alts):
            if not alts:
                raise TypingError("DuplicateLabel", "p-ty-recv", "receive offers no alternatives")
            _check_distinct([a.label for a in alts], "p-ty-recv")
            branches = tuple(
                (a.label, a.sort, _synth(ctx.bind(a.var, a.sort), a.cont, depth)) for a in alts
            )
            return LRecv(peer, branches)
        case Send(peer, label, payload, cont):
            sort = typecheck_expr(ctx, payload)
            return LSend(peer, ((label, sort, _synth(ctx, cont, depth)),))
        case Select(peer, alts):
            return LSend(peer, _synth_select(ctx, alts, depth))
        case If(cond, then_branch, else_branch):
            if typecheck_expr(ctx, cond) != BOOL:
                raise TypingError("SortMismatch", "p-ty-send", "condition is not a bool")
            lt = _synth(ctx, then_branch, depth)
            lf = _synth(ctx, else_branch, depth)
            if lt != lf:
                raise TypingError("BranchTypeMismatch", "p-ty-send",
                                  "the two branches of a conditional implement different local types")
            return lt
        case Read(fn, var, sort, cont):
            _check_extern(ctx, fn, UNIT, sort, "p-ty-read")
            return _synth(ctx.bind(var, sort), cont, depth)
        case Write(fn, payload, cont):
            arg = typecheck_expr(ctx, payload)
            _check_extern(ctx, fn, arg, UNIT, "p-ty-write")
            return _synth(ctx, cont, depth)
        case Interact(fn, arg, var, sort, cont):
            arg_sort = typecheck_expr(ctx, arg)
            _check_extern(ctx, fn, arg_sort, sort, "p-ty-interact")
            return _synth(ctx.bind(var, sort), cont, depth)
    raise TypeError(f"not a process: {p!r}")


def _check_distinct(labels: list[Label], rule: str) -> None:
    seen: set[Label] = set()
    for lbl in labels:
        if lbl in seen:
            raise TypingError("DuplicateLabel", rule, f"label {lbl!r} repeated")
        seen.add(lbl)


def _check_extern(ctx: TypingCtx, fn: str, arg: Sort, result: Sort, rule: str) -> None:
    sig = ctx.extern(fn)
    if sig is None:
        raise TypingError("UnknownExtern", rule, f"external function {fn!r} is not declared")
    if sig != (arg, result):
        raise TypingError(
            "ExternSignatureMismatch", rule,
            f"{fn!r} is {format_sort(sig[0])} -> {format_sort(sig[1])}, "
            f"used as {format_sort(arg)} -> {format_sort(result)}")


def _synth_select(ctx: TypingCtx, alts: tuple[SelectAlt, ...], depth: int):
    if not alts:
        raise TypingError("MissingDefault", "p-ty-send", "selection offers no alternatives")
    defaults = [a for a in alts if isinstance(a, Default)]
    if not defaults:
        raise TypingError("MissingDefault", "p-ty-send", "selection has no default alternative")
    if len(defaults) > 1:
        raise TypingError("MultipleDefaults", "p-ty-send", "selection has more than one default")
    last_case = max((i for i, a in enumerate(alts) if isinstance(a, Case)), default=-1)
    if alts.index(defaults[0]) < last_case:
        raise TypingError("DefaultBeforeCase", "p-ty-send", "the default must follow every guarded case")
    _check_distinct([a.label for a in alts], "p-ty-send")  # type: ignore[attr-defined]

    branches = []
    for a in alts:
        match a:
            case Case(guard, label, payload, sort, cont):
                if typecheck_expr(ctx, guard) != BOOL:
                    raise TypingError("SortMismatch", "p-ty-send", f"guard of case {label!r} is not a bool")
                got = typecheck_expr(ctx, payload)
                if got != sort:
                    raise TypingError("SortMismatch", "p-ty-send",
                                      f"case {label!r} declares {format_sort(sort)} but sends {format_sort(got)}")
                branches.append((label, sort, _synth(ctx, cont, depth)))
            case Default(label, payload, sort, cont):
                got = typecheck_expr(ctx, payload)
                if got != sort:
                    raise TypingError("SortMismatch", "p-ty-send",
                                      f"default {label!r} declares {format_sort(sort)} but sends {format_sort(got)}")
                branches.append((label, sort, _synth(ctx, cont, depth)))
            case Skip(label, sort, cont_type):
                try:
                    validate_local(cont_type, free_depth=depth)
                except Exception as err:
                    raise TypingError("BadSkipType", "p-ty-send",
                                      f"skip {label!r} declares an ill-formed type: {err}") from None
                branches.append((label, sort, cont_type))
    return tuple(branches)


def ltype_equiv_bounded(l1: LocalType, l2: LocalType, depth: int) -> bool:
    """Equality up to unfolding, decided by comparing trees to ``depth``."""
    return local_tree_expand(l1, depth) == local_tree_expand(l2, depth)


# ---------------------------------------------------------------------------
# Shifting and substitution over processes
# ---------------------------------------------------------------------------

def proc_shift(p: Proc, by: int, cutoff: int = 0) -> Proc:
    match p:
        case Jump(i):
            return Jump(i + by) if i >= cutoff else p
        case Loop(body):
            return Loop(proc_shift(body, by, cutoff + 1))
        case Recv(peer, alts):
            return Recv(peer, tuple(
                RecvAlt(a.label, a.var, a.sort, proc_shift(a.cont, by, cutoff)) for a in alts))
        case Send(peer, label, payload, cont):
            return Send(peer, label, payload, proc_shift(cont, by, cutoff))
        case Select(peer, alts):
            return Select(peer, tuple(_shift_alt(a, by, cutoff) for a in alts))
        case If(cond, t, f):
            return If(cond, proc_shift(t, by, cutoff), proc_shift(f, by, cutoff))
        case Read(fn, var, sort, cont):
            return Read(fn, var, sort, proc_shift(cont, by, cutoff))
        case Write(fn, payload, cont):
            return Write(fn, payload, proc_shift(cont, by, cutoff))
        case Interact(fn, arg, var, sort, cont):
            return Interact(fn, arg, var, sort, proc_shift(cont, by, cutoff))
        case _:
            return p


def _shift_alt(a: SelectAlt, by: int, cutoff: int) -> SelectAlt:
    match a:
        case Case(guard, label, payload, sort, cont):
            return Case(guard, label, payload, sort, proc_shift(cont, by, cutoff))
        case Default(label, payload, sort, cont):
            return Default(label, payload, sort, proc_shift(cont, by, cutoff))
        case Skip(label, sort, cont_type):
            # Loop indices inside declared types share the process's binder
            # numbering, past the type's own rec binders.
            return Skip(label, sort, l_shift(cont_type, by, cutoff))
    raise TypeError(f"not a selection alternative: {a!r}")


def proc_subst(p: Proc, j: int, rep: Proc, rep_type: LocalType) -> Proc:
    """Substitute ``rep`` for jump index ``j`` (and ``rep_type`` for the
    matching type variable inside declared skip types)."""
    match p:
        case Jump(i):
            if i == j:
                return rep
            return Jump(i - 1) if i > j else p
        case Loop(body):
            return Loop(proc_subst(body, j + 1, proc_shift(rep, 1), l_shift(rep_type, 1)))
        case Recv(peer, alts):
            return Recv(peer, tuple(
                RecvAlt(a.label, a.var, a.sort, proc_subst(a.cont, j, rep, rep_type)) for a in alts))
        case Send(peer, label, payload, cont):
            return Send(peer, label, payload, proc_subst(cont, j, rep, rep_type))
        case Select(peer, alts):
            return Select(peer, tuple(_subst_alt(a, j, rep, rep_type) for a in alts))
        case If(cond, t, f):
            return If(cond, proc_subst(t, j, rep, rep_type), proc_subst(f, j, rep, rep_type))
        case Read(fn, var, sort, cont):
            return Read(fn, var, sort, proc_subst(cont, j, rep, rep_type))
        case Write(fn, payload, cont):
            return Write(fn, payload, proc_subst(cont, j, rep, rep_type))
        case Interact(fn, arg, var, sort, cont):
            return Interact(fn, arg, var, sort, proc_subst(cont, j, rep, rep_type))
        case _:
            return p


def _subst_alt(a: SelectAlt, j: int, rep: Proc, rep_type: LocalType) -> SelectAlt:
    match a:
        case Case(guard, label, payload, sort, cont):
            return Case(guard, label, payload, sort, proc_subst(cont, j, rep, rep_type))
        case Default(label, payload, sort, cont):
            return Default(label, payload, sort, proc_subst(cont, j, rep, rep_type))
        case Skip(label, sort, cont_type):
            return Skip(label, sort, l_subst(cont_type, j, rep_type))
    raise TypeError(f"not a selection alternative: {a!r}")


def subst_value(p: Proc, name: str, value: object, sort: Sort) -> Proc:
    """Replace free occurrences of payload variable ``name`` by a literal."""
    lit = Lit(value, sort)

    def in_expr(e: Expr) -> Expr:
        match e:
            case VarRef(n):
                return lit if n == name else e
            case Arith(op, l, r):
                return Arith(op, in_expr(l), in_expr(r))
            case Cmp(op, l, r):
                return Cmp(op, in_expr(l), in_expr(r))
            case PairE(a, b):
                return PairE(in_expr(a), in_expr(b))
            case InlE(v, right):
                return InlE(in_expr(v), right)
            case InrE(v, left):
                return InrE(in_expr(v), left)
            case _:
                return e

    def go(t: Proc) -> Proc:
        match t:
            case Recv(peer, alts):
                return Recv(peer, tuple(
                    a if a.var == name else RecvAlt(a.label, a.var, a.sort, go(a.cont))
                    for a in alts))
            case Send(peer, label, payload, cont):
                return Send(peer, label, in_expr(payload), go(cont))
            case Select(peer, alts):
                out = []
                for a in alts:
                    match a:
                        case Case(guard, label, payload, s, cont):
                            out.append(Case(in_expr(guard), label, in_expr(payload), s, go(cont)))
                        case Default(label, payload, s, cont):
                            out.append(Default(label, in_expr(payload), s, go(cont)))
                        case Skip(_, _, _):
                            out.append(a)
                return Select(peer, tuple(out))
            case If(cond, tb, fb):
                return If(in_expr(cond), go(tb), go(fb))
            case Loop(body):
                return Loop(go(body))
            case Read(fn, var, s, cont):
                return t if var == name else Read(fn, var, s, go(cont))
            case Write(fn, payload, cont):
                return Write(fn, in_expr(payload), go(cont))
            case Interact(fn, arg, var, s, cont):
                cont2 = cont if var == name else go(cont)
                return Interact(fn, in_expr(arg), var, s, cont2)
            case _:
                return t

    return go(p)


# ---------------------------------------------------------------------------
# Process LTS
# ---------------------------------------------------------------------------

class NotEnabledProc(Exception):
    pass


class LabelNotOffered(Exception):
    pass


DEFAULT_NORMALIZE_FUEL = 256


def normalize(
    p: Proc,
    registry: Mapping[str, Callable],
    ctx: TypingCtx,
    fuel: int = DEFAULT_NORMALIZE_FUEL,
) -> Proc:
    """Evaluate internal actions at the head until a communication (or the
    end of the process) is exposed.  Loops unfold once per pass."""
    for _ in range(fuel):
        match p:
            case If(cond, t, f):
                v, _ = eval_expr(cond, registry)
                p = t if v else f
            case Select(_, alts):
                p = _resolve_select(p, registry)
            case Read(fn, var, sort, cont):
                v = _call(registry, fn, None)
                _require_fits(v, sort, fn)
                p = subst_value(cont, var, v, sort)
            case Write(fn, payload, cont):
                v, _ = eval_expr(payload, registry)
                _call(registry, fn, v)
                p = cont
            case Interact(fn, arg, var, sort, cont):
                a, _ = eval_expr(arg, registry)
                v = _call(registry, fn, a)
                _require_fits(v, sort, fn)
                p = subst_value(cont, var, v, sort)
            case Loop(body):
                loop_type = typecheck_proc(ctx, p)
                p = proc_subst(body, 0, p, loop_type)
            case _:
                return p
    raise EvaluationError(f"process did not reach a communication within {fuel} internal steps")


def _resolve_select(p: Select, registry: Mapping[str, Callable]) -> Proc:
    chosen: Optional[Union[Case, Default]] = None
    for a in p.alts:
        if isinstance(a, Case):
            v, _ = eval_expr(a.guard, registry)
            if v:
                chosen = a
                break
        elif isinstance(a, Default) and chosen is None:
            # Remember the default but keep scanning: a later case cannot
            # exist (defaults follow cases), so this only fires when no
            # guard before it was true.
            chosen = a
    if chosen is None:
        raise EvaluationError("selection has no default and no true guard")
    return Send(p.peer, chosen.label, chosen.payload, chosen.cont)


def _call(registry: Mapping[str, Callable], fn: str, arg: object):
    if fn not in registry:
        raise EvaluationError(f"external function {fn!r} is not registered")
    return registry[fn]() if arg is None else registry[fn](arg)


def _require_fits(v: object, sort: Sort, fn: str) -> None:
    if not value_fits(v, sort):
        raise EvaluationError(f"external function {fn!r} returned {v!r}, not a {format_sort(sort)}")


Universe = Mapping[Sort, tuple]

DEFAULT_UNIVERSE: Universe = {
    NAT: (0, 1, 2),
    INT: (0, 1, 2),
    BOOL: (True, False),
    UNIT: ((),),
}


def universe_values(sort: Sort, universe: Universe = DEFAULT_UNIVERSE) -> tuple:
    if sort in universe:
        return universe[sort]
    match sort:
        case Pair(a, b):
            return tuple((x, y) for x in universe_values(a, universe) for y in universe_values(b, universe))
        case Sum(a, b):
            return tuple(("inl", x) for x in universe_values(a, universe)) + tuple(
                ("inr", y) for y in universe_values(b, universe))
        case Seq(elem):
            return ((),) + tuple((x,) for x in universe_values(elem, universe))
    raise EvaluationError(f"no value universe for sort {format_sort(sort)}")


def proc_enabled(
    p: Proc,
    role: Role,
    registry: StubRegistry,
    ctx: TypingCtx,
    universe: Universe = DEFAULT_UNIVERSE,
) -> list[tuple[ValueAction, Proc]]:
    """Enabled value actions of ``p`` running as ``role``, received payloads
    drawn from the finite universe."""
    if not isinstance(registry, StubRegistry):
        raise TypeError("trace enumeration requires pure stubs (StubRegistry)")
    p = normalize(p, registry, ctx)
    match p:
        case Finish():
            return []
        case Send(peer, label, payload, cont):
            v, sort = eval_expr(payload, registry)
            return [(ValueAction(SEND, role, peer, label, v, sort), cont)]
        case Recv(peer, alts):
            out = []
            for a in alts:
                for v in universe_values(a.sort, universe):
                    act = ValueAction(RECV, role, peer, a.label, v, a.sort)
                    out.append((act, subst_value(a.cont, a.var, v, a.sort)))
            return out
    raise EvaluationError(f"unexpected head after normalisation: {p!r}")


def proc_step(
    p: Proc,
    a: ValueAction,
    registry: StubRegistry,
    ctx: TypingCtx,
    role: Optional[Role] = None,
) -> Proc:
    """Successor of ``p`` under the communication ``a``."""
    p = normalize(p, registry, ctx)
    match p:
        case Send(peer, label, payload, cont):
            if a.dir != SEND or a.other != peer or (role is not None and a.subj != role):
                raise NotEnabledProc(f"{a.pretty()} is not the send at the head")
            if a.label != label:
                raise LabelNotOffered(f"head sends {label!r}, not {a.label!r}")
            v, sort = eval_expr(payload, registry)
            if (v, sort) != (a.value, a.sort):
                raise NotEnabledProc(f"head sends {v!r}, not {a.value!r}")
            return cont
        case Recv(peer, alts):
            if a.dir != RECV or a.other != peer or (role is not None and a.subj != role):
                raise NotEnabledProc(f"{a.pretty()} is not the receive at the head")
            for alt in alts:
                if alt.label == a.label:
                    if not value_fits(a.value, alt.sort):
                        raise NotEnabledProc(f"{a.value!r} is not a {format_sort(alt.sort)}")
                    return subst_value(alt.cont, alt.var, a.value, alt.sort)
            raise LabelNotOffered(f"label {a.label!r} is not offered")
        case Finish():
            raise NotEnabledProc("the process has finished")
    raise EvaluationError(f"unexpected head after normalisation: {p!r}")


def proc_traces(
    p: Proc,
    role: Role,
    depth: int,
    registry: StubRegistry = EMPTY_STUBS,
    ctx: TypingCtx = TypingCtx(),
    universe: Universe = DEFAULT_UNIVERSE,
) -> tuple[set[ValueTrace], set[ValueTrace]]:
    """All value traces of length at most ``depth``: ``(prefixes, completed)``."""
    prefixes: set[ValueTrace] = set()
    completed: set[ValueTrace] = set()
    frontier: list[tuple[Proc, ValueTrace]] = [(p, ())]
    while frontier:
        proc, tr = frontier.pop()
        prefixes.add(tr)
        steps = proc_enabled(proc, role, registry, ctx, universe)
        if not steps and isinstance(normalize(proc, registry, ctx), Finish):
            completed.add(tr)
        if len(tr) >= depth:
            continue
        for a, succ in steps:
            frontier.append((succ, tr + (a,)))
    return prefixes, completed


# ---------------------------------------------------------------------------
# Complete subtraces and conformance
# ---------------------------------------------------------------------------

def subtrace_check(t1: Trace, t2: Trace, role: Role) -> bool:
    """Is ``t1`` exactly the subsequence of ``role``-subject actions of ``t2``?

    Non-subject actions of ``t2`` (including trailing ones) are skipped; every
    subject action must match the next action of ``t1``, and ``t1`` must be
    consumed completely.
    """
    i = 0
    for a in t2:
        if a.subj == role:
            if i < len(t1) and t1[i] == a:
                i += 1
            else:
                return False
    return i == len(t1)


@dataclass(frozen=True)
class ConformanceReport:
    role: Role
    typed: bool
    local_type: Optional[LocalType]
    projection_matches: bool
    traces_checked: int
    traces_embedded: bool
    failures: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return self.typed and self.projection_matches and self.traces_embedded


def check_conformance(
    p: Proc,
    g,
    role: Role,
    depth: int,
    universe: Universe = DEFAULT_UNIVERSE,
    registry: StubRegistry = EMPTY_STUBS,
    ctx: TypingCtx = TypingCtx(),
    check_traces: bool = True,
) -> ConformanceReport:
    """Three-stage conformance of a process against a protocol role.

    1. the process synthesises a local type;
    2. that type equals the projection of the protocol, up to unfolding,
       compared as depth-bounded trees;
    3. every bounded process trace, erased, embeds as the complete
       role-subsequence of some bounded protocol trace (searched to depth
       ``depth`` times the number of participants).
    """
    from . import projection as _projection
    from . import semantics as _semantics
    from .types import participants as _participants

    failures: list[str] = []
    local_type: Optional[LocalType] = None
    try:
        local_type = typecheck_proc(ctx, p)
        typed = True
    except TypingError as err:
        typed = False
        failures.append(f"typing: {err}")

    matches = False
    if typed:
        try:
            projected = _projection.project(g, role)
            matches = ltype_equiv_bounded(local_type, projected, max(depth, 2))
            if not matches:
                failures.append("projection: the synthesised type differs from the protocol's view of the role")
        except _projection.ProjectionError as err:
            failures.append(f"projection: {err}")

    embedded = True
    checked = 0
    if typed and matches and check_traces:
        system_depth = depth * max(1, len(_participants(g)))
        global_prefixes, _ = _semantics.traces_global(_semantics.initial_config(g), system_depth)
        own_prefixes, _ = proc_traces(p, role, depth, registry, ctx, universe)
        erased = {erase_trace(t) for t in own_prefixes}
        checked = len(erased)
        for t_p in sorted(erased, key=len):
            if not any(subtrace_check(t_p, t, role) for t in global_prefixes):
                embedded = False
                failures.append(
                    "traces: " + (" ".join(a.pretty() for a in t_p) or "<empty>")
                    + " does not embed in any protocol trace")
                break
    return ConformanceReport(role, typed, local_type, matches, checked, embedded, tuple(failures))
