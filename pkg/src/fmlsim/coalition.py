"""Hedonic coalition formation among learners.

A partition of the active learners into M coalitions (one pinned head
each) is rearranged by strict-improvement switching: learners are
scanned in ascending id, candidate coalitions in ascending index, and a
learner moves as soon as some coalition would give it strictly higher
utility (never one where its utility would be negative).  The loop ends
at a Nash-stable partition — no unilateral move improves anyone — or
raises after a documented switch budget.

Utilities are hedonic: a learner's value depends only on the member set
it would join (plus that coalition's pinned head and current incentive),
so evaluated configurations are memoized per learner and never recosted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateFrequencyRange,
    DimMismatch,
    EmptyCoalition,
    InvalidParam,
    NonConvergence,
)
from . import costmodel
from .reputation import RepParams, rep_utility

logger = logging.getLogger(__name__)

# Hard cap on total switches before the dynamics are declared cyclic.
SWITCH_BUDGET_FLOOR = 1000
SWITCH_BUDGET_PER_CELL = 50


def cosine_similarity(e1: np.ndarray, e2: np.ndarray) -> float:
    """Cosine of two embedding vectors; 0.0 if either is all-zero."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise DimMismatch(f"{e1.shape} vs {e2.shape}")
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 == 0.0 or n2 == 0.0:
        return 0.0
    return float(np.dot(e1, e2) / (n1 * n2))


@dataclass
class UtilityInputs:
    """Everything a member's round utility depends on.

    similarity: cosine between the member's and the head's task embeddings
    delta: the member's chosen CPU frequency
    data_size / coalition_data_total: train-shard sizes (reward share)
    h_values: reputation utilities H of every coalition member (self included)
    delta_lo / delta_hi: coalition-wide frequency range for the reward share
    """

    similarity: float
    delta: float
    data_size: float
    coalition_data_total: float
    h_values: list
    i_comp: float
    i_rep: float
    comp_energy: float
    comm_energy: float
    delta_lo: float
    delta_hi: float


def mml_utility(inp: UtilityInputs) -> float:
    """Member utility: competition reward + reputation reward - energies.

    (S + freq_share * data_share) * I_comp + mean(H) * I_rep - E_comp - E_comm,
    where freq_share = (delta - delta_lo)/(delta_hi - delta_lo), defined
    as 1 when the coalition range is a single point.
    """
    if inp.delta_hi < inp.delta_lo:
        raise DegenerateFrequencyRange(f"[{inp.delta_lo}, {inp.delta_hi}]")
    if inp.coalition_data_total < inp.data_size:
        raise InvalidParam("coalition data total smaller than member's data")
    if inp.delta_hi == inp.delta_lo:
        logger.debug("single-point frequency range; freq share defined as 1")
        freq_share = 1.0
    else:
        freq_share = (inp.delta - inp.delta_lo) / (inp.delta_hi - inp.delta_lo)
    data_share = inp.data_size / inp.coalition_data_total
    reward = (inp.similarity + freq_share * data_share) * inp.i_comp
    reward += float(np.mean(inp.h_values)) * inp.i_rep
    return reward - inp.comp_energy - inp.comm_energy


def select_heads(coalitions: list, global_reps: dict, t_max: dict) -> list:
    """Pick one head per coalition: argmax of R_global * deadline tightness.

    Score = R_global(i) * (1 - (T_max(i) - T_min)/(T_span)); a coalition
    whose members all share one T_max scores everyone at R_global.  Ties
    go to the lowest id.
    """
    heads = []
    for members in coalitions:
        if not members:
            raise EmptyCoalition("cannot select a head for an empty coalition")
        lo = min(t_max[i] for i in members)
        hi = max(t_max[i] for i in members)
        span = hi - lo
        best_id, best_score = None, -np.inf
        for i in sorted(members):
            tightness = 1.0 if span == 0 else 1.0 - (t_max[i] - lo) / span
            score = global_reps[i] * tightness
            if score > best_score:
                best_id, best_score = i, score
        heads.append(best_id)
    return heads


@dataclass
class PartitionState:
    """M disjoint coalitions, their heads, and this round's movement trace."""

    coalitions: list
    heads: list
    round: int = 0
    switches: list = field(default_factory=list)  # (learner, from, to, delta_utility)
    parked: list = field(default_factory=list)

    def validate(self) -> None:
        seen = set()
        for j, members in enumerate(self.coalitions):
            for i in members:
                if i in seen:
                    raise InvalidParam(f"learner {i} appears in two coalitions")
                seen.add(i)
            head = self.heads[j]
            if members and head is not None and head not in members:
                raise InvalidParam(f"head {head} not inside coalition {j}")
        if seen & set(self.parked):
            raise InvalidParam("parked learner still assigned to a coalition")

    def coalition_of(self, learner: int):
        for j, members in enumerate(self.coalitions):
            if learner in members:
                return j
        return None


class _Memo:
    """Per-learner history of evaluated coalition configurations."""

    def __init__(self, utility_fn):
        self.utility_fn = utility_fn
        self.cache = {}

    def utility(self, learner: int, j: int, members: tuple) -> float:
        key = (learner, j, members)
        if key not in self.cache:
            self.cache[key] = self.utility_fn(learner, j, frozenset(members))
        return self.cache[key]


def _member_key(members) -> tuple:
    return tuple(sorted(members))


def run_switch_dynamics(
    coalitions: list,
    utility_fn,
    movable: list,
    require_nonneg_join: bool = False,
    max_switches: int | None = None,
):
    """Strict-improvement dynamics; returns (coalitions, switches, parked).

    utility_fn(learner, coalition_idx, member_frozenset) -> float, where
    the member set always includes the learner itself.
    """
    coalitions = [sorted(c) for c in coalitions]
    n = sum(len(c) for c in coalitions)
    if max_switches is None:
        max_switches = max(SWITCH_BUDGET_FLOOR, SWITCH_BUDGET_PER_CELL * n * len(coalitions))
    memo = _Memo(utility_fn)
    switches = []
    parked = []
    moved = True
    while moved:
        moved = False
        for i in sorted(movable):
            if i in parked:
                continue
            j_cur = next(j for j, c in enumerate(coalitions) if i in c)
            u_stay = memo.utility(i, j_cur, _member_key(coalitions[j_cur]))
            best_seen = u_stay
            target = None
            target_u = None
            for j in range(len(coalitions)):
                if j == j_cur:
                    continue
                u_move = memo.utility(i, j, _member_key(coalitions[j] + [i]))
                best_seen = max(best_seen, u_move)
                if u_move > u_stay and (not require_nonneg_join or u_move >= 0.0):
                    target, target_u = j, u_move
                    break  # first strictly better admissible coalition wins
            if require_nonneg_join and best_seen < 0.0:
                coalitions[j_cur].remove(i)
                parked.append(i)
                moved = True
                continue
            if target is not None:
                coalitions[j_cur].remove(i)
                coalitions[target] = sorted(coalitions[target] + [i])
                switches.append((i, j_cur, target, target_u - u_stay))
                moved = True
                if len(switches) > max_switches:
                    raise NonConvergence(
                        f"{len(switches)} switches exceed budget {max_switches}"
                    )
    return coalitions, switches, parked


def check_nash(
    partition: PartitionState,
    utility_fn,
    movable: list | None = None,
    require_nonneg_join: bool = False,
):
    """Certify Nash stability; returns (True, None) or (False, witness).

    witness = (learner, from_coalition, to_coalition, u_stay, u_move) for
    the first profitable unilateral deviation found.
    """
    memo = _Memo(utility_fn)
    if movable is None:
        movable = [i for c in partition.coalitions for i in c]
    for i in sorted(movable):
        j_cur = partition.coalition_of(i)
        if j_cur is None:
            continue
        u_stay = memo.utility(i, j_cur, _member_key(partition.coalitions[j_cur]))
        for j in range(len(partition.coalitions)):
            if j == j_cur:
                continue
            u_move = memo.utility(i, j, _member_key(list(partition.coalitions[j]) + [i]))
            if u_move > u_stay and (not require_nonneg_join or u_move >= 0.0):
                return False, (i, j_cur, j, u_stay, u_move)
    return True, None


def build_gfml_utility(
    profiles: dict,
    heads: list,
    rep_matrix: np.ndarray,
    rep_params: RepParams,
    similarity: np.ndarray,
    i_comp: list,
    i_rep: float,
    tau: int,
    batch: int,
):
    """Member-utility closure over pinned heads and current incentives.

    profiles[i] must expose data_size, cost (DeviceCost), t_max, delta_min,
    delta_max.  rep_matrix[j, i] is learner i's overall reputation toward
    head j; similarity[j, i] the cosine between their task embeddings.
    The member prices each candidate coalition at its own best-response
    frequency against that coalition's current incentive, and sees -inf
    where the head's deadline is unreachable.
    """
    from .stackelberg import follower_best_response  # lazy: avoids import cycle

    def utility(i: int, j: int, members: frozenset) -> float:
        prof = profiles[i]
        ids = sorted(members)
        data_total = sum(profiles[k].data_size for k in ids)
        delta_lo = min(profiles[k].delta_min for k in ids)
        delta_hi = max(profiles[k].delta_max for k in ids)
        head = heads[j]
        t_max = profiles[head].t_max
        try:
            delta, _ = follower_best_response(
                data_size=prof.data_size,
                data_total=data_total,
                cost=prof.cost,
                delta_min=prof.delta_min,
                delta_max=prof.delta_max,
                delta_lo=delta_lo,
                delta_hi=delta_hi,
                t_max=t_max,
                i_comp=i_comp[j],
                tau=tau,
                batch=batch,
            )
        except Exception:
            return -np.inf  # no feasible frequency under this head's deadline
        r_bar = max(rep_matrix[j, k] for k in ids)
        h_values = [rep_utility(rep_matrix[j, k], r_bar, rep_params) for k in ids]
        return mml_utility(
            UtilityInputs(
                similarity=similarity[j, i],
                delta=delta,
                data_size=prof.data_size,
                coalition_data_total=data_total,
                h_values=h_values,
                i_comp=i_comp[j],
                i_rep=i_rep,
                comp_energy=costmodel.comp_energy(prof.cost, tau, batch, delta),
                comm_energy=costmodel.comm_energy(prof.cost, delta),
                delta_lo=delta_lo,
                delta_hi=delta_hi,
            )
        )

    return utility


def form_coalitions(
    profiles: dict,
    partition_prev: PartitionState,
    heads: list,
    rep_matrix: np.ndarray,
    rep_params: RepParams,
    similarity: np.ndarray,
    i_comp: list,
    i_rep: float,
    tau: int,
    batch: int,
    max_switches: int | None = None,
) -> PartitionState:
    """One round of the coalition game with pinned heads.

    Starts from the previous partition, runs strict-improvement switching
    for every non-head member (learners never enter a coalition at
    negative utility; learners negative everywhere are parked for the
    round), and returns the Nash-stable result with its switch trace.
    """
    utility = build_gfml_utility(
        profiles, heads, rep_matrix, rep_params, similarity, i_comp, i_rep, tau, batch
    )
    movable = [i for c in partition_prev.coalitions for i in c if i not in heads]
    coalitions, switches, parked = run_switch_dynamics(
        [list(c) for c in partition_prev.coalitions],
        utility,
        movable,
        require_nonneg_join=True,
        max_switches=max_switches,
    )
    state = PartitionState(
        coalitions=coalitions,
        heads=list(heads),
        round=partition_prev.round,
        switches=switches,
        parked=parked,
    )
    state.validate()
    return state
