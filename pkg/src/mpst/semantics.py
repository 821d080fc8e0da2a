"""Asynchronous operational semantics for protocols.

Two labelled transition systems over the same alphabet of send/receive
actions: one steps a global configuration (a protocol with in-flight
markers), the other steps a pair of a local environment and a queue
environment.  Bounded, exhaustive enumeration of both yields finite trace
sets; comparing them is a decidable surrogate for the equivalence of the two
views of a protocol, and :func:`check_step_soundness` /
:func:`check_step_completeness` check the per-step correspondence through
re-projection.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional

from . import projection
from .semantics_state import LocalEnv, QueueEnv
from .types import (
    DEFAULT_UNFOLD_FUEL,
    FuelExhausted,
    GEnd,
    GMsg,
    GRec,
    GSent,
    GVar,
    GlobalConfig,
    GlobalType,
    LEnd,
    LRec,
    LRecv,
    LSend,
    LVar,
    Label,
    LocalTree,
    LocalType,
    Role,
    Sort,
    TEnd,
    TRecv,
    TSend,
    format_sort,
    participants,
    truncate_tree,
    unfold1,
    validate_global,
)

SEND = "!"
RECV = "?"


@dataclass(frozen=True)
class Action:
    """One communication event.

    The subject is the role performing the action and always sits first:
    ``!pq(l,S)`` is p sending to q, ``?qp(l,S)`` is q receiving from p.
    """

    dir: str  # SEND or RECV
    subj: Role
    other: Role
    label: Label
    sort: Sort

    def key(self) -> tuple:
        return (self.dir, self.subj, self.other, self.label, format_sort(self.sort))

    def pretty(self) -> str:
        return f"{self.dir}{self.subj}{self.other}({self.label},{format_sort(self.sort)})"


def send_action(sender: Role, receiver: Role, label: Label, sort: Sort) -> Action:
    return Action(SEND, sender, receiver, label, sort)


def recv_action(receiver: Role, sender: Role, label: Label, sort: Sort) -> Action:
    return Action(RECV, receiver, sender, label, sort)


def subject(a: Action) -> Role:
    return a.subj


Trace = tuple[Action, ...]


class NotEnabled(Exception):
    """The configuration or environment cannot perform the requested action."""


class Ambiguous(Exception):
    """Several distinct successors exist for one action (strict mode only)."""


# ---------------------------------------------------------------------------
# Global LTS
# ---------------------------------------------------------------------------

def initial_config(g: GlobalType) -> GlobalConfig:
    """Embed a protocol as its marker-free starting configuration."""
    validate_global(g)
    return g


def _unfold_budgeted(t: GlobalConfig, budget: list[int]) -> GlobalConfig:
    while isinstance(t, GRec):
        if budget[0] <= 0:
            raise FuelExhausted("unfolding budget exhausted while stepping")
        budget[0] -= 1
        t = unfold1(t)
    return t


def _enum_steps(
    c: GlobalConfig,
    budget: list[int],
    visiting: set[GlobalConfig],
) -> list[tuple[Action, GlobalConfig, int]]:
    """All derivable steps of ``c`` as (action, successor, priority) triples.

    Priority 0 marks a step taken at the head of the configuration, 1 a step
    derived structurally under it; the single-step API prefers the head rule
    when both yield the same action.  The search treats a revisited subterm
    as unable to step: the step relation only has finite derivations, so a
    derivation that needs the same subterm again can never close.
    """
    if c in visiting:
        return []
    c = _unfold_budgeted(c, budget)
    if c in visiting:
        return []
    visiting = visiting | {c}

    out: list[tuple[Action, GlobalConfig, int]] = []
    match c:
        case GEnd() | GVar(_):
            return []
        case GMsg(p, q, branches):
            for lbl, sort, _ in branches:
                out.append((send_action(p, q, lbl, sort), GSent(p, q, lbl, branches), 0))
            # A step under an unsent message: every branch must take it.
            per_branch = [_enum_steps(cont, budget, visiting) for _, _, cont in branches]
            if per_branch and all(per_branch):
                common = None
                for steps in per_branch:
                    acts = {a for a, _, _ in steps if a.subj not in (p, q)}
                    common = acts if common is None else common & acts
                for a in sorted(common or (), key=Action.key):
                    new_branches = []
                    for (lbl, sort, _), steps in zip(branches, per_branch):
                        succs = [s for act, s, _ in steps if act == a]
                        new_branches.append((lbl, sort, succs[0]))
                    out.append((a, GMsg(p, q, tuple(new_branches)), 1))
        case GSent(p, q, chosen, branches):
            lbl, sort, cont = c.chosen_branch()
            out.append((recv_action(q, p, lbl, sort), cont, 0))
            # A step under the marker: anyone but the receiver may act inside
            # the chosen branch while the message is still in flight.
            for a, succ, _ in _enum_steps(cont, budget, visiting):
                if a.subj != q:
                    new_branches = tuple(
                        (l2, s2, succ if l2 == chosen else c2) for l2, s2, c2 in branches
                    )
                    out.append((a, GSent(p, q, chosen, new_branches), 1))
        case _:
            raise TypeError(f"not a configuration: {c!r}")

    out.sort(key=lambda e: (e[0].key(), e[2]))
    return out


def global_enabled(
    c: GlobalConfig, fuel: int = DEFAULT_UNFOLD_FUEL
) -> list[tuple[Action, GlobalConfig]]:
    """Every enabled action of ``c`` with its successor, deterministically ordered."""
    steps = _enum_steps(c, [fuel], set())
    seen: set[tuple[Action, GlobalConfig]] = set()
    out = []
    for a, succ, _ in steps:
        if (a, succ) not in seen:
            seen.add((a, succ))
            out.append((a, succ))
    return out


def global_step(
    c: GlobalConfig,
    a: Action,
    fuel: int = DEFAULT_UNFOLD_FUEL,
    *,
    strict: bool = False,
) -> GlobalConfig:
    """The successor of ``c`` under ``a``; head-rule successor on rule overlap."""
    matches = [(succ, prio) for act, succ, prio in _enum_steps(c, [fuel], set()) if act == a]
    if not matches:
        raise NotEnabled(f"{a.pretty()} is not enabled")
    distinct = {succ for succ, _ in matches}
    if strict and len(distinct) > 1:
        raise Ambiguous(f"{a.pretty()} has {len(distinct)} successors")
    return min(matches, key=lambda m: m[1])[0]


def is_terminated(c: GlobalConfig, fuel: int = DEFAULT_UNFOLD_FUEL) -> bool:
    return isinstance(_unfold_budgeted(c, [fuel]), GEnd)


def traces_global(
    c: GlobalConfig,
    depth: int,
    fuel: int = DEFAULT_UNFOLD_FUEL,
) -> tuple[set[Trace], set[Trace]]:
    """All bounded runs of the global LTS from ``c``.

    Returns ``(prefixes, completed)``: every action sequence of length at
    most ``depth``, and the subset of those that end in a terminated
    configuration.
    """
    prefixes: set[Trace] = set()
    completed: set[Trace] = set()
    frontier: list[tuple[GlobalConfig, Trace]] = [(c, ())]
    seen: set[tuple[GlobalConfig, Trace]] = {(c, ())}
    while frontier:
        cfg, tr = frontier.pop()
        prefixes.add(tr)
        if is_terminated(cfg, fuel):
            completed.add(tr)
        if len(tr) >= depth:
            continue
        for a, succ in global_enabled(cfg, fuel):
            nxt = (succ, tr + (a,))
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return prefixes, completed


def trace_admissible(
    c: GlobalConfig, trace: Iterable[Action], fuel: int = DEFAULT_UNFOLD_FUEL
) -> GlobalConfig:
    """Step ``c`` along ``trace``; raises :class:`NotEnabled` when it cannot."""
    for a in trace:
        c = global_step(c, a, fuel)
    return c


# ---------------------------------------------------------------------------
# Local LTS (environments of local types plus queues)
# ---------------------------------------------------------------------------

def _lhead(l: LocalType, budget: list[int]) -> LocalType:
    while isinstance(l, LRec):
        if budget[0] <= 0:
            raise FuelExhausted("unfolding budget exhausted in local environment")
        budget[0] -= 1
        l = unfold1(l)
    return l


def local_enabled(
    env: LocalEnv,
    queues: QueueEnv,
    fuel: int = DEFAULT_UNFOLD_FUEL,
) -> list[tuple[Action, tuple[LocalEnv, QueueEnv]]]:
    """Enabled actions of an environment: sends are always free, receives
    need the matching message at the head of the sender's queue."""
    out: list[tuple[Action, tuple[LocalEnv, QueueEnv]]] = []
    for role, l in env.entries:
        head = _lhead(l, [fuel])
        match head:
            case LSend(peer, branches):
                for lbl, sort, cont in branches:
                    a = send_action(role, peer, lbl, sort)
                    out.append((a, (env.set(role, cont), queues.enq((role, peer), (lbl, sort)))))
            case LRecv(peer, branches):
                msgs = queues.get((peer, role))
                if msgs:
                    head_lbl, head_sort = msgs[0]
                    for lbl, sort, cont in branches:
                        if lbl == head_lbl and sort == head_sort:
                            popped = queues.deq((peer, role))
                            assert popped is not None
                            a = recv_action(role, peer, lbl, sort)
                            out.append((a, (env.set(role, cont), popped[1])))
            case _:
                pass
    out.sort(key=lambda e: e[0].key())
    return out


def local_step(
    env: LocalEnv,
    queues: QueueEnv,
    a: Action,
    fuel: int = DEFAULT_UNFOLD_FUEL,
) -> tuple[LocalEnv, QueueEnv]:
    for act, succ in local_enabled(env, queues, fuel):
        if act == a:
            return succ
    raise NotEnabled(f"{a.pretty()} is not enabled in the environment")


def env_terminated(env: LocalEnv, queues: QueueEnv, fuel: int = DEFAULT_UNFOLD_FUEL) -> bool:
    """Every role is at end (up to unfolding) and no message is in flight."""
    if not queues.is_empty():
        return False
    return all(isinstance(_lhead(l, [fuel]), LEnd) for _, l in env.entries)


def traces_local(
    env: LocalEnv,
    queues: QueueEnv,
    depth: int,
    fuel: int = DEFAULT_UNFOLD_FUEL,
) -> tuple[set[Trace], set[Trace]]:
    prefixes: set[Trace] = set()
    completed: set[Trace] = set()
    frontier: list[tuple[LocalEnv, QueueEnv, Trace]] = [(env, queues, ())]
    seen = {(env, queues, ())}
    while frontier:
        e, q, tr = frontier.pop()
        prefixes.add(tr)
        if env_terminated(e, q, fuel):
            completed.add(tr)
        if len(tr) >= depth:
            continue
        for a, (e2, q2) in local_enabled(e, q, fuel):
            nxt = (e2, q2, tr + (a,))
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return prefixes, completed


# ---------------------------------------------------------------------------
# Single-role local type LTS (used for log validation and type preservation)
# ---------------------------------------------------------------------------

def ltype_step(
    l: LocalType, a: Action, self_role: Role, fuel: int = DEFAULT_UNFOLD_FUEL
) -> Optional[LocalType]:
    """Step one role's local type by an action whose subject is that role."""
    if a.subj != self_role:
        return None
    head = _lhead(l, [fuel])
    match head:
        case LSend(peer, branches) if a.dir == SEND and a.other == peer:
            for lbl, sort, cont in branches:
                if lbl == a.label and sort == a.sort:
                    return cont
        case LRecv(peer, branches) if a.dir == RECV and a.other == peer:
            for lbl, sort, cont in branches:
                if lbl == a.label and sort == a.sort:
                    return cont
        case _:
            return None
    return None


def ltype_accepts(
    l: LocalType,
    self_role: Role,
    actions: Iterable[Action],
    fuel: int = DEFAULT_UNFOLD_FUEL,
) -> bool:
    for a in actions:
        nxt = ltype_step(l, a, self_role, fuel)
        if nxt is None:
            return False
        l = nxt
    return True


# ---------------------------------------------------------------------------
# Trace equivalence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Counterexample:
    trace: Trace
    side: str  # "global-only" or "local-only"
    kind: str  # "prefix" or "completed"


@dataclass(frozen=True)
class EquivReport:
    depth: int
    global_trace_count: int
    local_trace_count: int
    verdict: Optional[Counterexample]  # None means the trace sets coincide

    @property
    def equal(self) -> bool:
        return self.verdict is None


def _minimal_diff(gs: set[Trace], ls: set[Trace], kind: str) -> Optional[Counterexample]:
    diff = gs ^ ls
    if not diff:
        return None
    tr = min(diff, key=lambda t: (len(t), tuple(a.key() for a in t)))
    side = "global-only" if tr in gs else "local-only"
    return Counterexample(tr, side, kind)


def check_trace_equiv(
    g: GlobalType,
    depth: int,
    fuel: int = DEFAULT_UNFOLD_FUEL,
) -> EquivReport:
    """Compare bounded global traces with bounded traces of the projected
    environment started on empty queues; both prefix and completed sets must
    coincide."""
    env = LocalEnv.of(projection.project_all(g))
    gp, gc = traces_global(initial_config(g), depth, fuel)
    lp, lc = traces_local(env, QueueEnv.empty(), depth, fuel)
    verdict = _minimal_diff(gp, lp, "prefix") or _minimal_diff(gc, lc, "completed")
    return EquivReport(depth, len(gp), len(lp), verdict)


# ---------------------------------------------------------------------------
# Step soundness and completeness through re-projection
# ---------------------------------------------------------------------------

TreeEnv = dict[Role, LocalTree]


def _tree_env_step(
    env: TreeEnv, queues: QueueEnv, a: Action
) -> Optional[tuple[TreeEnv, QueueEnv]]:
    tree = env.get(a.subj)
    if tree is None:
        return None
    if a.dir == SEND:
        if not isinstance(tree, TSend) or tree.peer != a.other:
            return None
        for lbl, sort, cont in tree.branches:
            if lbl == a.label and sort == a.sort:
                env2 = dict(env)
                env2[a.subj] = cont
                return env2, queues.enq((a.subj, a.other), (lbl, sort))
        return None
    if not isinstance(tree, TRecv) or tree.peer != a.other:
        return None
    msgs = queues.get((a.other, a.subj))
    if not msgs or msgs[0] != (a.label, a.sort):
        return None
    for lbl, sort, cont in tree.branches:
        if lbl == a.label and sort == a.sort:
            popped = queues.deq((a.other, a.subj))
            assert popped is not None
            env2 = dict(env)
            env2[a.subj] = cont
            return env2, popped[1]
    return None


def _tree_env_enabled(env: TreeEnv, queues: QueueEnv) -> list[tuple[Action, tuple[TreeEnv, QueueEnv]]]:
    out = []
    for role in sorted(env):
        tree = env[role]
        match tree:
            case TSend(peer, branches):
                for lbl, sort, _ in branches:
                    a = send_action(role, peer, lbl, sort)
                    succ = _tree_env_step(env, queues, a)
                    assert succ is not None
                    out.append((a, succ))
            case TRecv(peer, branches):
                msgs = queues.get((peer, role))
                if msgs:
                    for lbl, sort, _ in branches:
                        if (lbl, sort) == msgs[0]:
                            a = recv_action(role, peer, lbl, sort)
                            succ = _tree_env_step(env, queues, a)
                            assert succ is not None
                            out.append((a, succ))
            case _:
                pass
    out.sort(key=lambda e: e[0].key())
    return out


def _truncate_env(env: TreeEnv, depth: int) -> TreeEnv:
    return {r: truncate_tree(t, depth) for r, t in env.items()}


@dataclass(frozen=True)
class StepCheckReport:
    ok: bool
    configs_checked: int
    steps_checked: int
    failure: Optional[str] = None


def _reachable(g: GlobalType, depth: int, fuel: int) -> list[GlobalConfig]:
    start = initial_config(g)
    seen: set[GlobalConfig] = {start}
    frontier = [(start, 0)]
    order = [start]
    while frontier:
        cfg, d = frontier.pop()
        if d >= depth:
            continue
        for _, succ in global_enabled(cfg, fuel):
            if succ not in seen:
                seen.add(succ)
                order.append(succ)
                frontier.append((succ, d + 1))
    return order


def check_step_soundness(
    g: GlobalType,
    depth: int,
    tree_depth: int = 8,
    fuel: int = DEFAULT_UNFOLD_FUEL,
) -> StepCheckReport:
    """Every global step is matched by a local step of the projected pair,
    landing on the projection of the successor configuration.

    Projections are compared as trees truncated to ``tree_depth``; the
    matching side is projected one level deeper so the consumed constructor
    does not show up as a spurious difference.
    """
    roles = sorted(participants(g))
    steps = 0
    configs = _reachable(g, depth, fuel)
    for cfg in configs:
        env = {r: projection.config_project(cfg, r, tree_depth + 1, fuel) for r in roles}
        queues = projection.queue_project(cfg)
        for a, succ in global_enabled(cfg, fuel):
            steps += 1
            stepped = _tree_env_step(env, queues, a)
            if stepped is None:
                return StepCheckReport(False, len(configs), steps,
                                       f"no local step for {a.pretty()} at {cfg!r}")
            env2, queues2 = stepped
            env3 = {r: projection.config_project(succ, r, tree_depth + 1, fuel) for r in roles}
            queues3 = projection.queue_project(succ)
            if queues2 != queues3 or _truncate_env(env2, tree_depth) != _truncate_env(env3, tree_depth):
                return StepCheckReport(False, len(configs), steps,
                                       f"local successor of {a.pretty()} is not the re-projection")
    return StepCheckReport(True, len(configs), steps)


def check_step_completeness(
    g: GlobalType,
    depth: int,
    tree_depth: int = 8,
    fuel: int = DEFAULT_UNFOLD_FUEL,
) -> StepCheckReport:
    """Every step of the projected pair is matched by a global step whose
    successor re-projects to the stepped pair."""
    roles = sorted(participants(g))
    steps = 0
    configs = _reachable(g, depth, fuel)
    for cfg in configs:
        env = {r: projection.config_project(cfg, r, tree_depth + 1, fuel) for r in roles}
        queues = projection.queue_project(cfg)
        for a, (env2, queues2) in _tree_env_enabled(env, queues):
            steps += 1
            candidates = [succ for act, succ in global_enabled(cfg, fuel) if act == a]
            if not candidates:
                return StepCheckReport(False, len(configs), steps,
                                       f"local step {a.pretty()} has no global counterpart at {cfg!r}")
            matched = False
            for succ in candidates:
                env3 = {r: projection.config_project(succ, r, tree_depth + 1, fuel) for r in roles}
                queues3 = projection.queue_project(succ)
                if queues2 == queues3 and _truncate_env(env2, tree_depth) == _truncate_env(env3, tree_depth):
                    matched = True
                    break
            if not matched:
                return StepCheckReport(False, len(configs), steps,
                                       f"no global successor of {a.pretty()} re-projects to the stepped pair")
    return StepCheckReport(True, len(configs), steps)
