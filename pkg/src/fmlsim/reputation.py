"""Contribution scores and decayed reputations with a bounded utility map.

Each round a learner earns a non-negative contribution
theta = (u + 1) * ln(1 + slack) from its training statistic u in [-1, 1]
and its schedule slack.  Reputations are recency-weighted sums of past
contributions; the task-specific variant discounts contributions earned
under other heads by head-to-head task similarity.  H maps a reputation
to a (0, 1] utility weight relative to the best reputation in the
coalition.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParam

logger = logging.getLogger(__name__)


@dataclass
class RepParams:
    """Shape of the reputation-to-utility map H."""

    gamma: float = 0.5  # H value at the threshold
    r_th: float = 0.5   # threshold reputation


def contribution(u: float, t_max: float, t_comp: float, t_comm: float) -> float:
    """theta = (u + 1) * ln(1 + slack), slack floored at zero.

    u is clamped to [-1, 1] (logged when the clamp fires), so theta >= 0;
    theta = 0 both at u = -1 and at zero schedule slack.
    """
    if not -1.0 <= u <= 1.0:
        logger.debug("clamping u=%g into [-1, 1]", u)
        u = float(np.clip(u, -1.0, 1.0))
    slack = max(0.0, t_max - t_comp - t_comm)
    return (u + 1.0) * float(np.log1p(slack))


@dataclass
class ReputationStore:
    """History of (round, head, theta) entries per learner.

    decay: the per-step recency discount lambda; the most recent entry is
    weighted lambda^1, the one before lambda^2, and so on, merged across
    heads.  phi mixes global and task reputations.
    """

    decay: float = 0.7
    phi: float = 0.2
    history: dict = field(default_factory=dict)  # learner -> list of (round, head, theta)

    def record(self, learner: int, head: int, round_idx: int, theta: float) -> None:
        if theta < 0:
            raise InvalidParam(f"theta must be >= 0, got {theta}")
        entries = self.history.setdefault(learner, [])
        if any(r == round_idx and h == head for r, h, _ in entries):
            raise InvalidParam(
                f"duplicate entry for learner {learner}, head {head}, round {round_idx}"
            )
        if entries and round_idx < entries[-1][0]:
            raise InvalidParam("rounds must be non-decreasing per learner")
        entries.append((round_idx, head, theta))

    def _recent_first(self, learner: int):
        return sorted(self.history.get(learner, ()), key=lambda e: e[0], reverse=True)

    def global_rep(self, learner: int) -> float:
        """Sum of decay^k * theta over history, k=1 at the most recent round."""
        total = 0.0
        for k, (_, _, theta) in enumerate(self._recent_first(learner), start=1):
            total += self.decay**k * theta
        return total

    def task_rep(self, learner: int, head: int, similarity) -> float:
        """Like global_rep, but contributions under other heads are scaled
        by similarity(head, other_head)."""
        total = 0.0
        for k, (_, h, theta) in enumerate(self._recent_first(learner), start=1):
            weight = 1.0 if h == head else similarity(head, h)
            total += self.decay**k * weight * theta
        return total

    def overall_rep(self, learner: int, head: int, similarity) -> float:
        """phi * global + (1 - phi) * task."""
        return self.phi * self.global_rep(learner) + (1.0 - self.phi) * self.task_rep(
            learner, head, similarity
        )


def rep_utility(r: float, r_bar: float, params: RepParams) -> float:
    """Map reputation r to a utility weight in (0, 1].

    Below the threshold: gamma * exp(r - r_th).  At or above it:
    gamma + (1 - gamma) * ln(1 + mu) with mu = (e - 1)*(r - r_th)/(r_bar - r_th),
    so H(r_th) = gamma exactly and H(r_bar) = 1.0 exactly.  When the
    coalition best r_bar equals the threshold, mu = 0.
    """
    if r < params.r_th:
        return params.gamma * float(np.exp(r - params.r_th))
    if r_bar < params.r_th:
        raise InvalidParam(f"r_bar {r_bar} below threshold {params.r_th} with r >= r_th")
    if r_bar == params.r_th:
        mu = 0.0  # degenerate coalition: best reputation sits at the threshold
    elif r == r_bar:
        return 1.0  # mu = e - 1, so ln(1 + mu) = 1; avoid float wobble at the top
    else:
        mu = (np.e - 1.0) * (r - params.r_th) / (r_bar - params.r_th)
    return params.gamma + (1.0 - params.gamma) * float(np.log1p(mu))
