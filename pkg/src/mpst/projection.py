"""Endpoint projection of protocols and of runtime configurations.

``project`` extracts one participant's local type from a global type.  It is
partial: at a message the participant neither sends nor receives, all branch
projections must agree (plain merge), otherwise the protocol gives that
bystander no single continuation to follow.

``config_project`` and ``queue_project`` are the runtime counterparts: they
project an in-flight configuration (with :class:`~mpst.types.GSent` markers)
onto per-role behaviour trees and onto the queue contents that must be in
transit, respectively.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

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
    LEND,
    LEnd,
    LRec,
    LRecv,
    LSend,
    LVar,
    Label,
    LocalTree,
    LocalType,
    Role,
    TCUT,
    TEND,
    TRecv,
    TSend,
    _is_pure_rec,
    canonical_ltype,
    l_max_free_index,
    part_of,
    participants,
    unfold1,
    validate_global,
)
from .semantics_state import QueueEnv


class ProjectionError(Exception):
    """Projection is undefined at some node of the input.

    ``kind`` is MergeConflict, UnguardedProjection, or InternalPartiality;
    ``rule`` names the side condition that failed (proj-cont, proj-rec,
    co-proj-cont); ``path`` lists the branch labels from the root to the
    message node where projection got stuck.
    """

    def __init__(
        self,
        kind: str,
        rule: str,
        path: tuple[Label, ...],
        message: str,
        detail: Optional[tuple] = None,
        role: Optional[Role] = None,
    ):
        where = "/".join(path) or "<root>"
        onto = f" onto {role}" if role else ""
        super().__init__(f"{kind} [{rule}] at {where}{onto}: {message}")
        self.kind = kind
        self.rule = rule
        self.path = path
        self.detail = detail
        self.role = role

    def tagged(self, role: Role) -> "ProjectionError":
        return ProjectionError(self.kind, self.rule, self.path, str(self.args[0]), self.detail, role)


def _has_actions(l: LocalType) -> bool:
    match l:
        case LSend(_, _) | LRecv(_, _):
            return True
        case LRec(body):
            return _has_actions(body)
        case _:
            return False


def project(g: GlobalType, role: Role, *, strict_rec: bool = False) -> LocalType:
    """Project the global type ``g`` onto ``role``.

    At a recursion binder the projected body must still be guarded; a body
    that loops without any action for ``role`` collapses to end (the role
    simply is not part of that loop).  With ``strict_rec`` the collapse is an
    UnguardedProjection error instead.

    Raises :class:`ProjectionError` when no rule applies, most commonly a
    MergeConflict on a bystander branch point.
    """

    def go(t: GlobalType, path: tuple[Label, ...]) -> LocalType:
        match t:
            case GEnd():
                return LEND
            case GVar(i):
                return LVar(i)
            case GRec(body):
                sub = go(body, path)
                if _is_pure_rec(sub, 0):
                    if strict_rec:
                        raise ProjectionError(
                            "UnguardedProjection", "proj-rec", path,
                            f"{role} takes no action in this loop", role=role,
                        )
                    return LEND
                cand = LRec(sub)
                # A loop with no send/receive for this role is behaviourally
                # inert; collapse it so absent roles project to end.
                if not _has_actions(cand) and l_max_free_index(cand) < 0:
                    return LEND
                return cand
            case GMsg(p, q, branches):
                if role == p:
                    return LSend(q, tuple((lbl, s, go(cont, path + (lbl,))) for lbl, s, cont in branches))
                if role == q:
                    return LRecv(p, tuple((lbl, s, go(cont, path + (lbl,))) for lbl, s, cont in branches))
                subs = [(lbl, go(cont, path + (lbl,))) for lbl, _, cont in branches]
                first_lbl, first = subs[0]
                for lbl, other in subs[1:]:
                    if canonical_ltype(other) != canonical_ltype(first):
                        raise ProjectionError(
                            "MergeConflict", "proj-cont", path,
                            f"branches {first_lbl!r} and {lbl!r} give {role} different continuations",
                            detail=(first, other), role=role,
                        )
                return first
            case GSent(_, _, _, _):
                raise ProjectionError(
                    "InternalPartiality", "proj-cont", path,
                    "in-flight marker in a source protocol", role=role,
                )
        raise TypeError(f"not a global type: {t!r}")

    validate_global(g)
    return go(g, ())


def project_all(g: GlobalType, *, strict_rec: bool = False) -> dict[Role, LocalType]:
    """Project onto every participant; any single failure fails the whole map."""
    out: dict[Role, LocalType] = {}
    for role in sorted(participants(g)):
        try:
            out[role] = project(g, role, strict_rec=strict_rec)
        except ProjectionError as err:
            raise err.tagged(role) from None
    return out


# ---------------------------------------------------------------------------
# Configuration projection
# ---------------------------------------------------------------------------

@dataclass
class _Budget:
    left: int

    def spend(self) -> None:
        if self.left <= 0:
            raise FuelExhausted("unfolding budget exhausted during configuration projection")
        self.left -= 1


def config_project(
    c: GlobalConfig,
    role: Role,
    depth: int,
    fuel: int = DEFAULT_UNFOLD_FUEL,
) -> LocalTree:
    """Project a runtime configuration onto ``role`` as a depth-bounded tree.

    A sent-but-unreceived message is invisible to everyone except its
    receiver, who sees a plain receive node; roles outside the configuration
    project to the end tree.
    """
    budget = _Budget(fuel)

    def go(t: GlobalConfig, d: int, path: tuple[Label, ...]) -> LocalTree:
        if d <= 0:
            return TCUT
        while isinstance(t, GRec):
            budget.spend()
            t = unfold1(t)
        match t:
            case GEnd():
                return TEND
            case GMsg(p, q, branches):
                if role == p:
                    return TSend(q, tuple(
                        (lbl, s, go(cont, d - 1, path + (lbl,)))
                        for lbl, s, cont in sorted(branches, key=lambda b: b[0])
                    ))
                if role == q:
                    return TRecv(p, tuple(
                        (lbl, s, go(cont, d - 1, path + (lbl,)))
                        for lbl, s, cont in sorted(branches, key=lambda b: b[0])
                    ))
                if not part_of(role, t):
                    return TEND
                for lbl, _, cont in branches:
                    if not part_of(role, cont):
                        raise ProjectionError(
                            "MergeConflict", "co-proj-cont", path,
                            f"{role} occurs in some branches but not under {lbl!r}",
                            role=role,
                        )
                # Bystander: no local constructor is produced, so the depth
                # budget is not consumed while skipping this exchange.
                subs = [(lbl, go(cont, d, path + (lbl,))) for lbl, _, cont in branches]
                first_lbl, first = subs[0]
                for lbl, other in subs[1:]:
                    if other != first:
                        raise ProjectionError(
                            "MergeConflict", "co-proj-cont", path,
                            f"branches {first_lbl!r} and {lbl!r} give {role} different trees",
                            detail=(first, other), role=role,
                        )
                return first
            case GSent(p, q, chosen, branches):
                if role == q:
                    return TRecv(p, tuple(
                        (lbl, s, go(cont, d - 1, path + (lbl,)))
                        for lbl, s, cont in sorted(branches, key=lambda b: b[0])
                    ))
                _, _, cont = t.chosen_branch()
                return go(cont, d, path + (chosen,))
            case GVar(_):
                raise ProjectionError(
                    "InternalPartiality", "co-proj-cont", path,
                    "open configuration", role=role,
                )
        raise TypeError(f"not a configuration: {t!r}")

    return go(c, depth, ())


class InconsistentQueues(Exception):
    """Branches of an unsent message demand different queue contents.

    Cannot happen for configurations reached from a well-formed protocol; it
    signals a corrupted configuration.
    """


def queue_project(c: GlobalConfig) -> QueueEnv:
    """The unique queue environment of a configuration.

    Each in-flight marker contributes its message at the *front* of the
    sender-to-receiver queue as the recursion returns, so outer (earlier)
    sends end up ahead of inner (later) ones: dequeue order is send order.
    """

    def go(t: GlobalConfig) -> QueueEnv:
        match t:
            case GEnd() | GVar(_) | GRec(_):
                # Markers never occur under recursion binders.
                return QueueEnv.empty()
            case GMsg(p, q, branches):
                qs = [go(cont) for _, _, cont in branches]
                for other in qs[1:]:
                    if other != qs[0]:
                        raise InconsistentQueues(f"branches of {p} -> {q} disagree on queue contents")
                if qs[0].get((p, q)):
                    raise InconsistentQueues(f"queue {p} -> {q} non-empty at an unsent message")
                return qs[0]
            case GSent(p, q, _, _):
                lbl, sort, cont = t.chosen_branch()
                return go(cont).push_front((p, q), (lbl, sort))
        raise TypeError(f"not a configuration: {t!r}")

    return go(c)


def one_shot_project(
    c: GlobalConfig,
    depth: int,
    fuel: int = DEFAULT_UNFOLD_FUEL,
) -> tuple[dict[Role, LocalTree], QueueEnv]:
    """Project a configuration onto every participant and onto the queues."""
    env = {r: config_project(c, r, depth, fuel) for r in sorted(participants(c))}
    return env, queue_project(c)
