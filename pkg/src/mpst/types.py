"""Syntax of protocols: payload sorts, global types, local types, and trees.

A *global type* describes a whole protocol from a bird's-eye view; a *local
type* is the slice of the protocol one participant sees.  Both are finite
recursive terms; recursion binders use de Bruijn indices internally (surface
syntax uses names, see :mod:`mpst.parser`).  Recursive types are identified
with their unfoldings, so equality checks go through finite *tree* expansions
(:func:`local_tree_expand`) rather than syntactic comparison.

Runtime configurations reuse the global-type syntax plus one extra node,
:class:`GSent`, marking a message that has been sent but not yet received.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Union


Role = str
Label = str


# ---------------------------------------------------------------------------
# Sorts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sort:
    pass


@dataclass(frozen=True)
class Base(Sort):
    name: str  # "nat" | "int" | "bool" | "unit"


@dataclass(frozen=True)
class Pair(Sort):
    left: Sort
    right: Sort


@dataclass(frozen=True)
class Sum(Sort):
    left: Sort
    right: Sort


@dataclass(frozen=True)
class Seq(Sort):
    elem: Sort


NAT = Base("nat")
INT = Base("int")
BOOL = Base("bool")
UNIT = Base("unit")

# Value ranges for the numeric sorts; arithmetic outside these is an error.
NAT_MAX = 2**64 - 1
INT_MIN = -(2**63)
INT_MAX = 2**63 - 1


def format_sort(s: Sort) -> str:
    match s:
        case Base(name):
            return name
        case Pair(a, b):
            return f"pair({format_sort(a)},{format_sort(b)})"
        case Sum(a, b):
            return f"sum({format_sort(a)},{format_sort(b)})"
        case Seq(a):
            return f"seq({format_sort(a)})"
    raise TypeError(f"not a sort: {s!r}")


# ---------------------------------------------------------------------------
# Global types (and runtime configurations)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GlobalType:
    pass


@dataclass(frozen=True)
class GEnd(GlobalType):
    pass


@dataclass(frozen=True)
class GVar(GlobalType):
    index: int


@dataclass(frozen=True)
class GRec(GlobalType):
    body: GlobalType


# A branch is (label, payload sort, continuation).  Branch order is source
# order and is preserved by every operation; comparisons that must be
# order-insensitive canonicalise by label first.
GBranch = tuple[Label, Sort, GlobalType]


@dataclass(frozen=True)
class GMsg(GlobalType):
    sender: Role
    receiver: Role
    branches: tuple[GBranch, ...]


@dataclass(frozen=True)
class GSent(GlobalType):
    """A message in flight: the label has been chosen and sent, not received.

    Only appears in runtime configurations, never in source protocols, and
    never under a GRec binder.
    """

    sender: Role
    receiver: Role
    chosen: Label
    branches: tuple[GBranch, ...]

    def chosen_branch(self) -> GBranch:
        for br in self.branches:
            if br[0] == self.chosen:
                return br
        raise ValueError(f"chosen label {self.chosen!r} not among branches")


GlobalConfig = GlobalType  # configurations = global types + GSent markers

GEND = GEnd()


# ---------------------------------------------------------------------------
# Local types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalType:
    pass


@dataclass(frozen=True)
class LEnd(LocalType):
    pass


@dataclass(frozen=True)
class LVar(LocalType):
    index: int


@dataclass(frozen=True)
class LRec(LocalType):
    body: LocalType


LBranch = tuple[Label, Sort, LocalType]


@dataclass(frozen=True)
class LSend(LocalType):
    peer: Role
    branches: tuple[LBranch, ...]


@dataclass(frozen=True)
class LRecv(LocalType):
    peer: Role
    branches: tuple[LBranch, ...]


LEND = LEnd()


# ---------------------------------------------------------------------------
# Local trees: finite expansions of local types, recursion unfolded away
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalTree:
    pass


@dataclass(frozen=True)
class TEnd(LocalTree):
    pass


@dataclass(frozen=True)
class TCut(LocalTree):
    """Depth budget exhausted; stands for the unexplored remainder."""


TBranch = tuple[Label, Sort, LocalTree]


@dataclass(frozen=True)
class TSend(LocalTree):
    peer: Role
    branches: tuple[TBranch, ...]  # always sorted by label (canonical form)


@dataclass(frozen=True)
class TRecv(LocalTree):
    peer: Role
    branches: tuple[TBranch, ...]


TEND = TEnd()
TCUT = TCut()


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class WellFormednessError(Exception):
    """A protocol violates a structural precondition.

    ``kind`` is one of NotGuarded, NotClosed, EmptyBranches, SelfMessage,
    DuplicateLabel, SentMarker; ``path`` is the list of branch labels leading
    to the offending node.
    """

    def __init__(self, kind: str, path: tuple[Label, ...], message: str):
        super().__init__(f"{kind} at {'/'.join(path) or '<root>'}: {message}")
        self.kind = kind
        self.path = path
        self.reason = message


class NotARec(Exception):
    """unfold1 was applied to a term whose head is not a recursion binder."""


# ---------------------------------------------------------------------------
# Participants and tables
# ---------------------------------------------------------------------------

def participants(g: GlobalType) -> frozenset[Role]:
    """Roles occurring as sender or receiver anywhere in ``g``."""
    acc: set[Role] = set()

    def walk(t: GlobalType) -> None:
        match t:
            case GMsg(p, q, branches) | GSent(p, q, _, branches):
                acc.add(p)
                acc.add(q)
                for _, _, cont in branches:
                    walk(cont)
            case GRec(body):
                walk(body)
            case _:
                pass

    walk(g)
    return frozenset(acc)


def part_of(role: Role, g: GlobalType) -> bool:
    """Whether ``role`` occurs in ``g`` as a message endpoint."""
    match g:
        case GMsg(p, q, branches) | GSent(p, q, _, branches):
            if role in (p, q):
                return True
            return any(part_of(role, cont) for _, _, cont in branches)
        case GRec(body):
            return part_of(role, body)
        case _:
            return False


def labels_of(g: GlobalType) -> frozenset[Label]:
    acc: set[Label] = set()

    def walk(t: GlobalType) -> None:
        match t:
            case GMsg(_, _, branches) | GSent(_, _, _, branches):
                for lbl, _, cont in branches:
                    acc.add(lbl)
                    walk(cont)
            case GRec(body):
                walk(body)
            case _:
                pass

    walk(g)
    return frozenset(acc)


def label_table(g: GlobalType) -> dict[Label, int]:
    """Dense wire ids for every label of the protocol, in lexicographic order.

    Deterministic given the protocol, so endpoints derived from the same
    global type agree on ids without negotiation.
    """
    return {lbl: i for i, lbl in enumerate(sorted(labels_of(g)))}


def role_table(g: GlobalType) -> dict[Role, int]:
    """Dense ids for the participants, in lexicographic name order."""
    return {r: i for i, r in enumerate(sorted(participants(g)))}


# ---------------------------------------------------------------------------
# Structural predicates
# ---------------------------------------------------------------------------

def _is_pure_rec(t: Union[GlobalType, LocalType], index: int) -> bool:
    # A chain of rec binders ending in the variable bound `index` levels up.
    match t:
        case GVar(i) | LVar(i):
            return i == index
        case GRec(body) | LRec(body):
            return _is_pure_rec(body, index + 1)
        case _:
            return False


def guarded(g: GlobalType) -> bool:
    """Every recursion binder does real work before looping back."""
    match g:
        case GEnd() | GVar(_):
            return True
        case GRec(body):
            return not _is_pure_rec(body, 0) and guarded(body)
        case GMsg(_, _, branches) | GSent(_, _, _, branches):
            return all(guarded(cont) for _, _, cont in branches)
    raise TypeError(f"not a global type: {g!r}")


def lguarded(l: LocalType) -> bool:
    match l:
        case LEnd() | LVar(_):
            return True
        case LRec(body):
            return not _is_pure_rec(body, 0) and lguarded(body)
        case LSend(_, branches) | LRecv(_, branches):
            return all(lguarded(cont) for _, _, cont in branches)
    raise TypeError(f"not a local type: {l!r}")


def g_max_free_index(g: GlobalType) -> int:
    """Largest free de Bruijn index in ``g``; -1 when none escape."""
    match g:
        case GEnd():
            return -1
        case GVar(i):
            return i
        case GRec(body):
            return g_max_free_index(body) - 1
        case GMsg(_, _, branches) | GSent(_, _, _, branches):
            return max((g_max_free_index(cont) for _, _, cont in branches), default=-1)
    raise TypeError(f"not a global type: {g!r}")


def l_max_free_index(l: LocalType) -> int:
    match l:
        case LEnd():
            return -1
        case LVar(i):
            return i
        case LRec(body):
            return l_max_free_index(body) - 1
        case LSend(_, branches) | LRecv(_, branches):
            return max((l_max_free_index(cont) for _, _, cont in branches), default=-1)
    raise TypeError(f"not a local type: {l!r}")


def closed(g: GlobalType) -> bool:
    return g_max_free_index(g) < 0


def lclosed(l: LocalType) -> bool:
    return l_max_free_index(l) < 0


def validate_global(g: GlobalType) -> None:
    """Raise :class:`WellFormednessError` unless ``g`` is a usable protocol.

    Checks, in order at each node: structural invariants (distinct branch
    labels, no self-messages, non-empty branch lists, no in-flight markers),
    then guardedness, then closure.  The first violation wins and carries the
    path to the offending node.
    """

    def walk(t: GlobalType, path: tuple[Label, ...]) -> None:
        match t:
            case GEnd() | GVar(_):
                return
            case GRec(body):
                if _is_pure_rec(body, 0):
                    raise WellFormednessError("NotGuarded", path, "recursion loops back without communicating")
                walk(body, path)
            case GSent(_, _, _, _):
                raise WellFormednessError("SentMarker", path, "in-flight marker in a source protocol")
            case GMsg(p, q, branches):
                if p == q:
                    raise WellFormednessError("SelfMessage", path, f"{p} sends to itself")
                if not branches:
                    raise WellFormednessError("EmptyBranches", path, f"{p} -> {q} offers no branches")
                seen: set[Label] = set()
                for lbl, _, _ in branches:
                    if lbl in seen:
                        raise WellFormednessError("DuplicateLabel", path, f"label {lbl!r} repeated")
                    seen.add(lbl)
                for lbl, _, cont in branches:
                    walk(cont, path + (lbl,))
            case _:
                raise TypeError(f"not a global type: {t!r}")

    walk(g, ())
    if not closed(g):
        raise WellFormednessError("NotClosed", (), "a recursion variable escapes its binders")


def well_formed(g: GlobalType) -> bool:
    try:
        validate_global(g)
    except WellFormednessError:
        return False
    return True


def validate_local(l: LocalType, free_depth: int = 0) -> None:
    """Structural checks for a local type; indices below ``free_depth`` may be free."""

    def walk(t: LocalType, path: tuple[Label, ...]) -> None:
        match t:
            case LEnd() | LVar(_):
                return
            case LRec(body):
                if _is_pure_rec(body, 0):
                    raise WellFormednessError("NotGuarded", path, "recursion loops back without communicating")
                walk(body, path)
            case LSend(_, branches) | LRecv(_, branches):
                if not branches:
                    raise WellFormednessError("EmptyBranches", path, "no branches")
                seen: set[Label] = set()
                for lbl, _, _ in branches:
                    if lbl in seen:
                        raise WellFormednessError("DuplicateLabel", path, f"label {lbl!r} repeated")
                    seen.add(lbl)
                for lbl, _, cont in branches:
                    walk(cont, path + (lbl,))
            case _:
                raise TypeError(f"not a local type: {t!r}")

    walk(l, ())
    if l_max_free_index(l) >= free_depth:
        raise WellFormednessError("NotClosed", (), "a recursion variable escapes its binders")


# ---------------------------------------------------------------------------
# Shifting, substitution, unfolding
# ---------------------------------------------------------------------------

def g_shift(g: GlobalType, by: int, cutoff: int = 0) -> GlobalType:
    match g:
        case GVar(i):
            return GVar(i + by) if i >= cutoff else g
        case GRec(body):
            return GRec(g_shift(body, by, cutoff + 1))
        case GMsg(p, q, branches):
            return GMsg(p, q, tuple((lbl, s, g_shift(c, by, cutoff)) for lbl, s, c in branches))
        case GSent(p, q, ch, branches):
            return GSent(p, q, ch, tuple((lbl, s, g_shift(c, by, cutoff)) for lbl, s, c in branches))
        case _:
            return g


def g_subst(g: GlobalType, j: int, rep: GlobalType) -> GlobalType:
    """Substitute ``rep`` for variable ``j`` and squash higher indices."""
    match g:
        case GVar(i):
            if i == j:
                return rep
            return GVar(i - 1) if i > j else g
        case GRec(body):
            return GRec(g_subst(body, j + 1, g_shift(rep, 1)))
        case GMsg(p, q, branches):
            return GMsg(p, q, tuple((lbl, s, g_subst(c, j, rep)) for lbl, s, c in branches))
        case GSent(p, q, ch, branches):
            return GSent(p, q, ch, tuple((lbl, s, g_subst(c, j, rep)) for lbl, s, c in branches))
        case _:
            return g


def l_shift(l: LocalType, by: int, cutoff: int = 0) -> LocalType:
    match l:
        case LVar(i):
            return LVar(i + by) if i >= cutoff else l
        case LRec(body):
            return LRec(l_shift(body, by, cutoff + 1))
        case LSend(p, branches):
            return LSend(p, tuple((lbl, s, l_shift(c, by, cutoff)) for lbl, s, c in branches))
        case LRecv(p, branches):
            return LRecv(p, tuple((lbl, s, l_shift(c, by, cutoff)) for lbl, s, c in branches))
        case _:
            return l


def l_subst(l: LocalType, j: int, rep: LocalType) -> LocalType:
    match l:
        case LVar(i):
            if i == j:
                return rep
            return LVar(i - 1) if i > j else l
        case LRec(body):
            return LRec(l_subst(body, j + 1, l_shift(rep, 1)))
        case LSend(p, branches):
            return LSend(p, tuple((lbl, s, l_subst(c, j, rep)) for lbl, s, c in branches))
        case LRecv(p, branches):
            return LRecv(p, tuple((lbl, s, l_subst(c, j, rep)) for lbl, s, c in branches))
        case _:
            return l


def unfold1(t: Union[GlobalType, LocalType]) -> Union[GlobalType, LocalType]:
    """One unfolding of a recursion-headed term: body with the binder plugged in.

    Callers must check the head; non-recursive heads raise :class:`NotARec`.
    """
    match t:
        case GRec(body):
            return g_subst(body, 0, t)
        case LRec(body):
            return l_subst(body, 0, t)
    raise NotARec(f"head is not a recursion binder: {t!r}")


class FuelExhausted(Exception):
    """An unfolding budget ran out; the input loops without progressing."""


DEFAULT_UNFOLD_FUEL = 64


def unfold_head(t, fuel: int = DEFAULT_UNFOLD_FUEL):
    """Unfold recursion binders at the head until another constructor shows."""
    budget = fuel
    while isinstance(t, (GRec, LRec)):
        if budget <= 0:
            raise FuelExhausted(f"no head constructor after {fuel} unfoldings")
        t = unfold1(t)
        budget -= 1
    return t


# ---------------------------------------------------------------------------
# Tree expansion
# ---------------------------------------------------------------------------

def local_tree_expand(l: LocalType, depth: int, fuel: int = DEFAULT_UNFOLD_FUEL) -> LocalTree:
    """Expand ``l`` into its behaviour tree down to ``depth`` constructors.

    Recursion is unfolded away on the fly, so two types that denote the same
    protocol yield identical trees at every depth.  Branches come out sorted
    by label: trees are canonical comparison objects, not syntax.
    """
    if depth <= 0:
        return TCUT
    head = unfold_head(l, fuel)
    match head:
        case LEnd():
            return TEND
        case LSend(peer, branches):
            subs = tuple(
                (lbl, s, local_tree_expand(cont, depth - 1, fuel))
                for lbl, s, cont in sorted(branches, key=lambda b: b[0])
            )
            return TSend(peer, subs)
        case LRecv(peer, branches):
            subs = tuple(
                (lbl, s, local_tree_expand(cont, depth - 1, fuel))
                for lbl, s, cont in sorted(branches, key=lambda b: b[0])
            )
            return TRecv(peer, subs)
        case LVar(_):
            raise ValueError("cannot expand an open local type")
    raise TypeError(f"not a local type: {head!r}")


def truncate_tree(t: LocalTree, depth: int) -> LocalTree:
    """Replace every node at distance ``depth`` from the root with a cut."""
    if depth <= 0:
        return TCUT
    match t:
        case TSend(p, branches):
            return TSend(p, tuple((lbl, s, truncate_tree(c, depth - 1)) for lbl, s, c in branches))
        case TRecv(p, branches):
            return TRecv(p, tuple((lbl, s, truncate_tree(c, depth - 1)) for lbl, s, c in branches))
        case _:
            return t


def canonical_ltype(l: LocalType) -> LocalType:
    """Branches sorted by label, recursively; used for set-like comparisons."""
    match l:
        case LSend(p, branches):
            return LSend(p, tuple(sorted(((lbl, s, canonical_ltype(c)) for lbl, s, c in branches), key=lambda b: b[0])))
        case LRecv(p, branches):
            return LRecv(p, tuple(sorted(((lbl, s, canonical_ltype(c)) for lbl, s, c in branches), key=lambda b: b[0])))
        case LRec(body):
            return LRec(canonical_ltype(body))
        case _:
            return l


def ltype_equal_up_to_order(l1: LocalType, l2: LocalType) -> bool:
    return canonical_ltype(l1) == canonical_ltype(l2)


def iter_nodes(g: GlobalType) -> Iterator[GlobalType]:
    yield g
    match g:
        case GRec(body):
            yield from iter_nodes(body)
        case GMsg(_, _, branches) | GSent(_, _, _, branches):
            for _, _, cont in branches:
                yield from iter_nodes(cont)
        case _:
            pass
