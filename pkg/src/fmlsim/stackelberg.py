"""Single-leader multi-follower incentive game over one coalition.

Followers (coalition members) pick CPU frequencies maximizing their own
round utility given the leader's competition incentive I_comp; the
member objective is concave-quadratic in the frequency, so the best
response is one of at most three candidates: the interior stationary
point, the deadline-implied minimum, or a frequency bound.  The leader
maximizes its own utility over I_comp in [i_min, i_max] by bisecting the
numerically differentiated objective, falling back to a grid plus local
refinement when the derivative does not change sign.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import costmodel
from .coalition import UtilityInputs, mml_utility
from .costmodel import DeviceCost
from .errors import EmptyCoalition, Infeasible, InvalidParam

logger = logging.getLogger(__name__)

SLACK_FLOOR = 1e-9   # deadline violators contribute ln(SLACK_FLOOR) to the leader
BISECT_TOL = 1e-8
BISECT_MAX_ITER = 200
FALLBACK_GRID = 64

KKT_INTERIOR = 1
KKT_DEADLINE = 2
KKT_UPPER = 3
KKT_LOWER = 4
KKT_DEADLINE_UPPER = 5
KKT_DEADLINE_LOWER = 6


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= 1e-9 * max(1.0, abs(a), abs(b))


def follower_best_response(
    data_size: float,
    data_total: float,
    cost: DeviceCost,
    delta_min: float,
    delta_max: float,
    delta_lo: float,
    delta_hi: float,
    t_max: float,
    i_comp: float,
    tau: int,
    batch: int,
):
    """Utility-maximizing frequency for one member; returns (delta, kkt_case).

    delta_min/delta_max are the member's own bounds; delta_lo/delta_hi the
    coalition-wide range that normalizes the frequency share.  Candidates
    are the interior stationary point of the concave quadratic, the
    deadline-implied minimum tau*c*batch/(t_max - t_comm), and the bounds;
    the feasible candidate with the highest utility wins.  Raises
    Infeasible when no frequency meets the head's deadline.
    """
    if not 0 < delta_min <= delta_max:
        raise InvalidParam(f"member frequency bounds [{delta_min}, {delta_max}]")
    if data_total < data_size or data_size <= 0:
        raise InvalidParam("bad data sizes")
    t_comm = costmodel.comm_time(cost)
    if t_max <= t_comm:
        raise Infeasible(f"deadline {t_max}s inside communication time {t_comm}s")
    delta_dl = tau * cost.cycles * batch / (t_max - t_comm)
    lo = max(delta_min, delta_dl)
    hi = delta_max
    if lo > hi:
        raise Infeasible(f"deadline needs delta >= {delta_dl:.3e}, cap is {delta_max:.3e}")

    data_share = data_size / data_total
    candidates = []
    if delta_hi > delta_lo:
        slope = data_share * i_comp / (delta_hi - delta_lo) - cost.comm_b / (1.0 - cost.eps_loss)
        curvature = 2.0 * (
            cost.rho * tau * cost.cycles * batch * cost.zeta
            + cost.comm_a / (1.0 - cost.eps_loss) ** 2
        )
        if curvature > 0:
            interior = slope / curvature
            if lo <= interior <= hi:
                candidates.append(interior)
    candidates += [lo, hi]

    def gain(delta: float) -> float:
        # delta-dependent utility terms only; S and the reputation reward are flat
        if delta_hi == delta_lo:
            freq_share = 1.0
        else:
            freq_share = (delta - delta_lo) / (delta_hi - delta_lo)
        return (
            freq_share * data_share * i_comp
            - costmodel.comp_energy(cost, tau, batch, delta)
            - costmodel.comm_energy(cost, delta)
        )

    best = candidates[0]
    best_gain = gain(best)
    for c in candidates[1:]:
        g = gain(c)
        if g > best_gain:
            best, best_gain = c, g

    at_dl = _close(best, delta_dl)
    at_hi = _close(best, delta_max)
    at_lo = _close(best, delta_min)
    if at_dl and at_hi:
        case = KKT_DEADLINE_UPPER
    elif at_dl and at_lo:
        case = KKT_DEADLINE_LOWER
    elif at_dl:
        case = KKT_DEADLINE
    elif at_hi:
        case = KKT_UPPER
    elif at_lo:
        case = KKT_LOWER
    else:
        case = KKT_INTERIOR
    return best, case


@dataclass
class MemberContext:
    """One follower as the games see it."""

    learner: int
    data_size: float
    cost: DeviceCost
    delta_min: float
    delta_max: float
    similarity: float  # cosine to the head's task embedding
    h_value: float     # reputation utility H toward this head


@dataclass
class CoalitionContext:
    """A coalition frozen for one equilibrium solve."""

    members: list
    t_max: float  # the head's completion deadline
    tau: int
    batch: int
    i_rep: float

    @property
    def data_total(self) -> float:
        return sum(m.data_size for m in self.members)

    @property
    def delta_lo(self) -> float:
        return min(m.delta_min for m in self.members)

    @property
    def delta_hi(self) -> float:
        return max(m.delta_max for m in self.members)


@dataclass
class LeaderParams:
    eta: float = 25.0
    i_comp_min: float = 5.0
    i_comp_max: float = 15.0


@dataclass
class EquilibriumResult:
    i_comp_star: float
    deltas: dict
    kkt_cases: dict
    u_msp: float
    u_mml: dict
    flagged_nonpositive: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "i_comp_star": self.i_comp_star,
            "deltas": {str(k): v for k, v in self.deltas.items()},
            "kkt_cases": {str(k): v for k, v in self.kkt_cases.items()},
            "u_msp": self.u_msp,
            "u_mml": {str(k): v for k, v in self.u_mml.items()},
            "flagged_nonpositive": list(self.flagged_nonpositive),
        }


def member_utility(ctx: CoalitionContext, m: MemberContext, i_comp: float, delta: float) -> float:
    """Full round utility of one member at a given frequency."""
    return mml_utility(
        UtilityInputs(
            similarity=m.similarity,
            delta=delta,
            data_size=m.data_size,
            coalition_data_total=ctx.data_total,
            h_values=[k.h_value for k in ctx.members],
            i_comp=i_comp,
            i_rep=ctx.i_rep,
            comp_energy=costmodel.comp_energy(m.cost, ctx.tau, ctx.batch, delta),
            comm_energy=costmodel.comm_energy(m.cost, delta),
            delta_lo=ctx.delta_lo,
            delta_hi=ctx.delta_hi,
        )
    )


def _best_responses(ctx: CoalitionContext, i_comp: float):
    deltas, cases = {}, {}
    for m in ctx.members:
        d, c = follower_best_response(
            data_size=m.data_size,
            data_total=ctx.data_total,
            cost=m.cost,
            delta_min=m.delta_min,
            delta_max=m.delta_max,
            delta_lo=ctx.delta_lo,
            delta_hi=ctx.delta_hi,
            t_max=ctx.t_max,
            i_comp=i_comp,
            tau=ctx.tau,
            batch=ctx.batch,
        )
        deltas[m.learner] = d
        cases[m.learner] = c
    return deltas, cases


def msp_utility(ctx: CoalitionContext, i_comp: float, deltas: dict, eta: float) -> float:
    """Leader utility: eta * sum(ln(slack) * H) - paid competition - paid reputation.

    Members whose schedule violates the deadline contribute ln(SLACK_FLOOR).
    An empty coalition is worth exactly 0 (its mean H is defined as 0).
    """
    if not ctx.members:
        return 0.0
    total_ln = 0.0
    paid_comp = 0.0
    for m in ctx.members:
        delta = deltas[m.learner]
        slack = (
            ctx.t_max
            - costmodel.comp_time(m.cost, ctx.tau, ctx.batch, delta)
            - costmodel.comm_time(m.cost)
        )
        total_ln += np.log(max(slack, SLACK_FLOOR)) * m.h_value
        if ctx.delta_hi == ctx.delta_lo:
            freq_share = 1.0
        else:
            freq_share = (delta - ctx.delta_lo) / (ctx.delta_hi - ctx.delta_lo)
        paid_comp += (m.similarity + freq_share * m.data_size / ctx.data_total) * i_comp
    avg_h = float(np.mean([m.h_value for m in ctx.members]))
    return eta * total_ln - paid_comp - avg_h * ctx.i_rep


def _golden_refine(fn, lo: float, hi: float, iters: int = 60):
    """Golden-section maximization of fn on [lo, hi]."""
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if b - a < BISECT_TOL:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fn(d)
    return (a + b) / 2.0


def leader_solve(ctx: CoalitionContext, leader: LeaderParams) -> EquilibriumResult:
    """Stackelberg solve: pick I_comp in [i_min, i_max] against best responses.

    The leader objective is evaluated through the followers' closed-form
    responses; its central-difference derivative (h = 1e-4 * (1 + I)) is
    bisected when it brackets a sign change, otherwise the best of a
    64-point grid (locally refined) and the interval ends is returned.
    """
    if not ctx.members:
        raise EmptyCoalition("leader_solve on an empty coalition")
    a, b = leader.i_comp_min, leader.i_comp_max
    if not a <= b:
        raise InvalidParam(f"incentive interval [{a}, {b}]")

    def utility(i_comp: float) -> float:
        deltas, _ = _best_responses(ctx, i_comp)
        return msp_utility(ctx, i_comp, deltas, leader.eta)

    def derivative(i_comp: float) -> float:
        h = 1e-4 * (1.0 + abs(i_comp))
        return (utility(i_comp + h) - utility(i_comp - h)) / (2.0 * h)

    candidates = [a, b]
    if b > a:
        h_a = 1e-4 * (1.0 + abs(a))
        h_b = 1e-4 * (1.0 + abs(b))
        x_lo, x_hi = a + h_a, b - h_b
        d_lo, d_hi = derivative(x_lo), derivative(x_hi)
        if d_lo > 0.0 and d_hi < 0.0:
            lo, hi = x_lo, x_hi
            for _ in range(BISECT_MAX_ITER):
                if hi - lo < BISECT_TOL:
                    break
                mid = 0.5 * (lo + hi)
                if derivative(mid) > 0.0:
                    lo = mid
                else:
                    hi = mid
            candidates.append(0.5 * (lo + hi))
        else:
            grid = np.linspace(a, b, FALLBACK_GRID)
            values = [utility(x) for x in grid]
            k = int(np.argmax(values))
            left = grid[max(k - 1, 0)]
            right = grid[min(k + 1, FALLBACK_GRID - 1)]
            candidates.append(_golden_refine(utility, left, right))

    best = max(candidates, key=utility)
    deltas, cases = _best_responses(ctx, best)
    u_msp = msp_utility(ctx, best, deltas, leader.eta)
    u_mml = {
        m.learner: member_utility(ctx, m, best, deltas[m.learner]) for m in ctx.members
    }
    flagged = [k for k, v in u_mml.items() if v <= 0.0]
    return EquilibriumResult(
        i_comp_star=float(best),
        deltas=deltas,
        kkt_cases=cases,
        u_msp=float(u_msp),
        u_mml=u_mml,
        flagged_nonpositive=flagged,
    )


def probe_equilibrium(
    ctx: CoalitionContext,
    leader: LeaderParams,
    result: EquilibriumResult,
    rel: float = 0.01,
    tol: float = 1e-9,
):
    """Definition-style equilibrium probes: +-rel perturbations never help.

    Perturbs I_comp (clamped to the leader interval) against re-solved
    best responses, and each member's frequency (projected to its feasible
    set) holding everything else fixed.  Returns (ok, detail).
    """
    scale = lambda x: tol * (1.0 + abs(x))
    for sign in (-1.0, 1.0):
        i_probe = float(
            np.clip(result.i_comp_star * (1.0 + sign * rel), leader.i_comp_min, leader.i_comp_max)
        )
        deltas, _ = _best_responses(ctx, i_probe)
        u = msp_utility(ctx, i_probe, deltas, leader.eta)
        if u > result.u_msp + scale(result.u_msp):
            return False, ("leader", sign, i_probe, u, result.u_msp)
    for m in ctx.members:
        d_star = result.deltas[m.learner]
        t_comm = costmodel.comm_time(m.cost)
        delta_dl = ctx.tau * m.cost.cycles * ctx.batch / (ctx.t_max - t_comm)
        lo = max(m.delta_min, delta_dl)
        for sign in (-1.0, 1.0):
            d_probe = float(np.clip(d_star * (1.0 + sign * rel), lo, m.delta_max))
            u = member_utility(ctx, m, result.i_comp_star, d_probe)
            if u > result.u_mml[m.learner] + scale(result.u_mml[m.learner]):
                return False, ("member", m.learner, sign, d_probe, u, result.u_mml[m.learner])
    return True, None
