"""Experiment orchestration: rounds, strategies, metrics, and outputs.

Each round refreshes task embeddings, rearranges coalitions per the
chosen strategy, solves (or bypasses) the incentive game, runs local
meta-training, aggregates per coalition, settles contributions and
reputations (through the ledger when enabled), and records metrics.

The whole run is a pure function of its ExperimentConfig: every random
draw comes from a stream keyed by (seed, purpose, round, learner), so
identical configs produce byte-identical metrics.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import costmodel, ledger, metalearner, stackelberg
from .coalition import (
    PartitionState,
    build_gfml_utility,
    cosine_similarity,
    form_coalitions,
    select_heads,
)
from .costmodel import DeviceCost
from .datasets import load_idx, partition_quantity_label, synth_blobs
from .errors import ConfigInvalid, Infeasible
from .metalearner import MetaHyper, ModelParams, accuracy, aggregate, embed, forward, init_params, local_update, personalize
from .reputation import RepParams, ReputationStore, contribution, rep_utility
from .stackelberg import CoalitionContext, LeaderParams, MemberContext, follower_best_response, leader_solve, member_utility, msp_utility

logger = logging.getLogger(__name__)

# strategy id -> (partition rule, head rule, frequency rule)
STRATEGIES = {
    "gfml": ("game", "score", "stackelberg"),
    "gfml_opt_freq": ("game", "tmax", "opt"),
    "gfml_random_freq": ("game", "random", "random"),
    "random_coalition_random": ("random", "random", "random"),
    "random_coalition_stackelberg": ("random", "random", "stackelberg"),
    "random_coalition_opt": ("random", "random", "opt"),
    "best_effort_random_head": ("grand", "random", "random"),
    "best_effort_stackelberg": ("grand", "tmax", "stackelberg"),
    "best_effort_opt": ("grand", "tmax", "opt"),
    "fixed_coalition_stackelberg": ("fixed", "fixed", "stackelberg"),
    "fixed_coalition_opt": ("fixed", "fixed", "opt"),
}

# rng stream purposes
_T_DATA, _T_PROFILE, _T_ACTIVE, _T_INIT, _T_PROBE = 1, 2, 3, 4, 5
_T_PARTITION, _T_HEADS, _T_FREQ, _T_TRAIN, _T_MISB, _T_PASSIVE = 6, 7, 8, 9, 10, 11

KKT_NOT_APPLICABLE = 0

METRICS_COLUMNS = [
    "round", "coalition", "head", "n_members", "n_participants",
    "accuracy_before", "accuracy_after", "loss_after", "latency",
    "u_msp", "i_comp_star", "mean_payoff", "mean_reputation",
]


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed,) + tags))


@dataclass
class ExperimentConfig:
    """All knobs of one experiment; defaults are the desk-scale operating point."""

    # population and schedule
    n_learners: int = 40
    m_coalitions: int = 4
    rounds: int = 30
    seed: int = 0
    strategy: str = "gfml"
    active_fraction: float = 0.9
    # meta-training
    alpha: float = 1e-3
    beta: float = 1e-2
    batch_size: int = 40
    tau: int = 10
    personalization_steps: int = 1
    probe_size: int = 16
    chi: int = 1
    exact_hvp: bool = True
    # device population
    model_size_bits: float = 1e7
    rho: float = 0.1
    zeta: float = 1e-27
    cycles_per_sample: float = 10.0
    delta_min: float = 1e7
    delta_max: float = 1e9
    b_min: float = 5e6
    b_max: float = 1e7
    t_max_min: float = 11.0
    t_max_max: float = 20.0
    comm_a: float = 0.0
    comm_b: float = 0.0
    comm_z: float = 1e-9
    eps_loss: float = 0.01
    # incentives and reputation
    i_comp_min: float = 5.0
    i_comp_max: float = 15.0
    i_rep: float = 5.0
    eta: float = 25.0
    decay_lambda: float = 0.7
    phi: float = 0.2
    gamma: float = 0.5
    r_th: float = 0.5
    # misbehavior and ledger
    misbehavior_ratio: float = 0.0
    misbehavior_tau: int = 2
    ledger_on: bool = True
    count_stale_accuracy: bool = True
    # data source
    dataset: str = "blobs"  # "blobs" or "idx"
    idx_images: str = ""
    idx_labels: str = ""
    blob_classes: int = 10
    blob_per_class: int = 100
    blob_dim: int = 20
    blob_sigma: float = 0.5
    blob_center_scale: float = 2.0
    classes_per_device: int = 2
    dirichlet_alpha: float = 0.5

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigInvalid(f"unknown strategy {self.strategy!r}")
        if self.n_learners < 1 or self.m_coalitions < 1 or self.rounds < 1:
            raise ConfigInvalid("n_learners, m_coalitions, rounds must be positive")
        if not 0.0 < self.active_fraction <= 1.0:
            raise ConfigInvalid("active_fraction must be in (0, 1]")
        if int(self.active_fraction * self.n_learners) < self.m_coalitions:
            raise ConfigInvalid("fewer active learners than coalitions")
        if not 0.0 <= self.misbehavior_ratio <= 1.0:
            raise ConfigInvalid("misbehavior_ratio must be in [0, 1]")
        if self.misbehavior_tau < 0 or self.tau < 0:
            raise ConfigInvalid("tau values must be >= 0")
        if not 0 < self.delta_min <= self.delta_max:
            raise ConfigInvalid("need 0 < delta_min <= delta_max")
        if not 0 < self.b_min <= self.b_max:
            raise ConfigInvalid("need 0 < b_min <= b_max")
        if not self.t_max_min <= self.t_max_max:
            raise ConfigInvalid("need t_max_min <= t_max_max")
        if not self.i_comp_min <= self.i_comp_max:
            raise ConfigInvalid("need i_comp_min <= i_comp_max")
        if self.chi < 1:
            raise ConfigInvalid("chi must be >= 1")
        if self.dataset not in ("blobs", "idx"):
            raise ConfigInvalid(f"unknown dataset source {self.dataset!r}")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigInvalid("idx dataset needs idx_images and idx_labels paths")
        if not 0.0 <= self.eps_loss < 1.0:
            raise ConfigInvalid("eps_loss must be in [0, 1)")

    def hyper(self) -> MetaHyper:
        return MetaHyper(
            alpha=self.alpha,
            beta=self.beta,
            tau=self.tau,
            batch_size=self.batch_size,
            exact_hvp=self.exact_hvp,
        )

    def rep_params(self) -> RepParams:
        return RepParams(gamma=self.gamma, r_th=self.r_th)

    def leader_params(self) -> LeaderParams:
        return LeaderParams(eta=self.eta, i_comp_min=self.i_comp_min, i_comp_max=self.i_comp_max)


@dataclass
class MmlProfile:
    """One device as the games and cost model see it."""

    learner: int
    data_size: int
    cost: DeviceCost
    t_max: float
    delta_min: float
    delta_max: float
    honest: bool = True


@dataclass
class RoundMetrics:
    round: int
    coalition_rows: list
    learner_rows: list


def inject_misbehavior(profiles: dict, ratio: float, seed: int) -> list:
    """Flag floor(ratio * N) profiles dishonest, chosen uniformly; returns ids."""
    ids = sorted(profiles)
    k = int(np.floor(ratio * len(ids)))
    rng = _rng(seed, _T_MISB)
    chosen = sorted(rng.choice(ids, size=k, replace=False).tolist()) if k else []
    for i in chosen:
        profiles[i].honest = False
    return chosen


class ExperimentState:
    """Everything that persists across rounds of one run."""

    def __init__(self, config: ExperimentConfig):
        config.validate()
        self.config = config
        self.round = 0

        ds_seed = int(_rng(config.seed, _T_DATA).integers(0, 2**31))
        if config.dataset == "blobs":
            self.dataset = synth_blobs(
                config.blob_classes,
                config.blob_per_class,
                config.blob_dim,
                config.blob_sigma,
                seed=ds_seed,
                center_scale=config.blob_center_scale,
            )
        else:
            self.dataset = load_idx(config.idx_images, config.idx_labels)
        self.shards = partition_quantity_label(
            self.dataset,
            config.n_learners,
            config.classes_per_device,
            seed=ds_seed + 1,
            dirichlet_alpha=config.dirichlet_alpha,
        )

        order = _rng(config.seed, _T_ACTIVE).permutation(config.n_learners)
        n_active = int(np.floor(config.active_fraction * config.n_learners))
        self.active_ids = sorted(int(i) for i in order[:n_active])
        self.passive_ids = sorted(int(i) for i in order[n_active:])

        prof_rng = _rng(config.seed, _T_PROFILE)
        self.profiles = {}
        for i in range(config.n_learners):
            bandwidth = prof_rng.uniform(config.b_min, config.b_max)
            t_max = prof_rng.uniform(config.t_max_min, config.t_max_max)
            if i not in self.active_ids:
                continue
            cost = DeviceCost(
                rho=config.rho,
                zeta=config.zeta,
                cycles=config.cycles_per_sample,
                comm_a=config.comm_a,
                comm_b=config.comm_b,
                comm_z=config.comm_z,
                eps_loss=config.eps_loss,
                model_bits=config.model_size_bits,
                bandwidth=bandwidth,
            )
            self.profiles[i] = MmlProfile(
                learner=i,
                data_size=len(self.shards[i].train),
                cost=cost,
                t_max=t_max,
                delta_min=config.delta_min,
                delta_max=config.delta_max,
            )
        self.dishonest_ids = inject_misbehavior(
            self.profiles, config.misbehavior_ratio, config.seed
        )

        self.theta0 = init_params(self.dataset.feature_dim, self.dataset.num_classes,
                                  _rng(config.seed, _T_INIT))
        self.probes = {}
        for i in range(config.n_learners):
            train = self.shards[i].train
            take = min(config.probe_size, len(train))
            idx = _rng(config.seed, _T_PROBE, i).permutation(len(train))[:take]
            self.probes[i] = train.features[idx]
        self.emb0 = {i: embed(self.theta0, self.probes[i]) for i in range(config.n_learners)}

        self.rep_store = ReputationStore(decay=config.decay_lambda, phi=config.phi)
        self.chain = ledger.Chain() if config.ledger_on else None
        self.last_acc_after = {}
        self.last_acc_before = {}
        self.metrics = []

        self._init_partition()
        self.models = [self.theta0.copy() for _ in self.partition.coalitions]
        self.i_comp_current = [config.i_comp_max] * len(self.partition.coalitions)
        self.delta_table = {i: self.emb0[i] for i in self.active_ids}  # per-head rows set on refresh
        self.fingerprints = dict(self.delta_table)
        self._refresh_embeddings()

    # ----- setup helpers -------------------------------------------------

    def _init_partition(self) -> None:
        cfg = self.config
        mode, _, _ = STRATEGIES[cfg.strategy]
        rng = _rng(cfg.seed, _T_PARTITION, 0)
        if mode == "grand":
            members = list(self.active_ids)
            head = int(rng.choice(members))
            self.partition = PartitionState(coalitions=[sorted(members)], heads=[head], round=0)
        elif mode == "fixed":
            seeds = sorted(self.active_ids, key=lambda i: (self.profiles[i].t_max, i))
            seeds = seeds[: cfg.m_coalitions]
            coalitions = [[s] for s in seeds]
            for i in self.active_ids:
                if i in seeds:
                    continue
                sims = [cosine_similarity(self.emb0[i], self.emb0[s]) for s in seeds]
                coalitions[int(np.argmax(sims))].append(i)
            self.partition = PartitionState(
                coalitions=[sorted(c) for c in coalitions], heads=list(seeds), round=0
            )
        else:  # "game" and "random" start from a random assignment
            heads = sorted(int(i) for i in rng.choice(self.active_ids, size=cfg.m_coalitions, replace=False))
            coalitions = [[h] for h in heads]
            for i in self.active_ids:
                if i in heads:
                    continue
                coalitions[int(rng.integers(cfg.m_coalitions))].append(i)
            self.partition = PartitionState(
                coalitions=[sorted(c) for c in coalitions], heads=heads, round=0
            )
        self.partition.validate()

    # ----- per-round steps ------------------------------------------------

    def _refresh_embeddings(self) -> None:
        """Recompute each learner's task-shift vector under every head model.

        delta_table[j][i] = embedding of i's probe under coalition j's model
        minus i's embedding under the initial model (raw at round 0).
        fingerprints[i] is i's shift under its own coalition's model, used
        for head-to-head task similarity in reputations.
        """
        m = len(self.partition.coalitions)
        self.delta_table = np.zeros((m, len(self.emb0[self.active_ids[0]]) * 0 + 1), dtype=object)
        table = {}
        for j in range(m):
            model = self.models[j]
            for i in self.active_ids:
                vec = embed(model, self.probes[i])
                if self.round > 0:
                    vec = vec - self.emb0[i]
                table[(j, i)] = vec
        self.delta_table = table
        for j, members in enumerate(self.partition.coalitions):
            for i in members:
                self.fingerprints[i] = table[(j, i)]

    def _head_similarity(self):
        cache = {}

        def sim(h1: int, h2: int) -> float:
            key = (h1, h2)
            if key not in cache:
                cache[key] = cosine_similarity(self.fingerprints[h1], self.fingerprints[h2])
            return cache[key]

        return sim

    def _similarity_matrix(self, heads: list) -> np.ndarray:
        n = max(self.active_ids) + 1
        s = np.zeros((len(heads), n))
        for j, h in enumerate(heads):
            ref = self.delta_table[(j, h)]
            for i in self.active_ids:
                s[j, i] = cosine_similarity(self.delta_table[(j, i)], ref)
        return s

    def _rep_matrix(self, heads: list) -> np.ndarray:
        sim = self._head_similarity()
        n = max(self.active_ids) + 1
        r = np.zeros((len(heads), n))
        for j, h in enumerate(heads):
            for i in self.active_ids:
                r[j, i] = self.rep_store.overall_rep(i, h, sim)
        return r

    def _select_heads_for_round(self, coalitions: list, rule: str) -> list:
        cfg = self.config
        if rule == "score":
            reps = {i: self.rep_store.global_rep(i) for i in self.active_ids}
            tmax = {i: self.profiles[i].t_max for i in self.active_ids}
            return select_heads(coalitions, reps, tmax)
        if rule == "tmax":
            return [min(c, key=lambda i: (self.profiles[i].t_max, i)) for c in coalitions]
        if rule == "random":
            rng = _rng(cfg.seed, _T_HEADS, self.round)
            return [int(rng.choice(sorted(c))) for c in coalitions]
        if rule == "fixed":
            return list(self.partition.heads)
        raise ConfigInvalid(f"unknown head rule {rule}")

    def _arrange_coalitions(self) -> None:
        """Step 2: strategy-dependent partition and head selection."""
        cfg = self.config
        mode, head_rule, _ = STRATEGIES[cfg.strategy]
        if self.round == 0:
            return  # round 0 trains on the randomly initialized arrangement
        if mode == "fixed":
            self.partition = PartitionState(
                coalitions=[list(c) for c in self.partition.coalitions],
                heads=list(self.partition.heads),
                round=self.round,
            )
            return
        if mode == "grand":
            members = sorted(self.active_ids)
            heads = self._select_heads_for_round([members], head_rule)
            self.partition = PartitionState(coalitions=[members], heads=heads, round=self.round)
            return
        if mode == "random":
            rng = _rng(cfg.seed, _T_PARTITION, self.round)
            heads = sorted(int(i) for i in rng.choice(self.active_ids, size=cfg.m_coalitions, replace=False))
            coalitions = [[h] for h in heads]
            for i in self.active_ids:
                if i in heads:
                    continue
                coalitions[int(rng.integers(cfg.m_coalitions))].append(i)
            self.partition = PartitionState(
                coalitions=[sorted(c) for c in coalitions], heads=heads, round=self.round
            )
            return
        # hedonic game from the previous arrangement
        heads = self._select_heads_for_round(self.partition.coalitions, head_rule)
        rep_matrix = self._rep_matrix(heads)
        similarity = self._similarity_matrix(heads)
        prev = PartitionState(
            coalitions=[list(c) for c in self.partition.coalitions],
            heads=heads,
            round=self.round,
        )
        self.partition = form_coalitions(
            self.profiles,
            prev,
            heads,
            rep_matrix,
            self.config.rep_params(),
            similarity,
            i_comp=list(self.i_comp_current),
            i_rep=cfg.i_rep,
            tau=cfg.tau,
            batch=cfg.batch_size,
        )

    def _deadline_feasible(self, prof: MmlProfile, t_max: float) -> bool:
        t_comm = costmodel.comm_time(prof.cost)
        if t_max <= t_comm:
            return False
        needed = self.config.tau * prof.cost.cycles * self.config.batch_size / (t_max - t_comm)
        return needed <= prof.delta_max

    def _solve_incentives(self, rep_matrix, similarity):
        """Step 3: per-coalition frequencies and incentives; returns plans.

        plan[j] = dict(i_comp, deltas, cases, u_msp, participants, excluded)
        """
        cfg = self.config
        _, _, freq_rule = STRATEGIES[cfg.strategy]
        plans = []
        for j, members in enumerate(self.partition.coalitions):
            head = self.partition.heads[j]
            t_max = self.profiles[head].t_max if head is not None else cfg.t_max_min
            feasible = [i for i in members if self._deadline_feasible(self.profiles[i], t_max)]
            excluded = {i: "deadline" for i in members if i not in feasible}
            plan = {
                "head": head, "t_max": t_max, "i_comp": cfg.i_comp_max,
                "deltas": {}, "cases": {}, "u_msp": 0.0, "u_mml": {},
                "participants": [], "excluded": excluded,
            }
            if feasible:
                r_bar = max(rep_matrix[j, i] for i in feasible)
                ctx = CoalitionContext(
                    members=[
                        MemberContext(
                            learner=i,
                            data_size=self.profiles[i].data_size,
                            cost=self.profiles[i].cost,
                            delta_min=self.profiles[i].delta_min,
                            delta_max=self.profiles[i].delta_max,
                            similarity=similarity[j, i],
                            h_value=rep_utility(rep_matrix[j, i], r_bar, cfg.rep_params()),
                        )
                        for i in sorted(feasible)
                    ],
                    t_max=t_max,
                    tau=cfg.tau,
                    batch=cfg.batch_size,
                    i_rep=cfg.i_rep,
                )
                if freq_rule == "stackelberg":
                    res = leader_solve(ctx, cfg.leader_params())
                    plan.update(
                        i_comp=res.i_comp_star, deltas=res.deltas, cases=res.kkt_cases,
                        u_msp=res.u_msp, u_mml=res.u_mml,
                    )
                    for i in res.flagged_nonpositive:
                        excluded[i] = "nonpositive_utility"
                elif freq_rule == "opt":
                    deltas, cases = {}, {}
                    for m in ctx.members:
                        d, c = follower_best_response(
                            data_size=m.data_size, data_total=ctx.data_total, cost=m.cost,
                            delta_min=m.delta_min, delta_max=m.delta_max,
                            delta_lo=ctx.delta_lo, delta_hi=ctx.delta_hi,
                            t_max=t_max, i_comp=cfg.i_comp_max, tau=cfg.tau, batch=cfg.batch_size,
                        )
                        deltas[m.learner], cases[m.learner] = d, c
                    u_mml = {m.learner: member_utility(ctx, m, cfg.i_comp_max, deltas[m.learner])
                             for m in ctx.members}
                    plan.update(
                        i_comp=cfg.i_comp_max, deltas=deltas, cases=cases,
                        u_msp=msp_utility(ctx, cfg.i_comp_max, deltas, cfg.eta), u_mml=u_mml,
                    )
                    for i, v in u_mml.items():
                        if v <= 0.0:
                            excluded[i] = "nonpositive_utility"
                else:  # random frequencies
                    rng = _rng(cfg.seed, _T_FREQ, self.round, j)
                    deltas, cases = {}, {}
                    for m in ctx.members:
                        deltas[m.learner] = float(rng.uniform(m.delta_min, m.delta_max))
                        cases[m.learner] = KKT_NOT_APPLICABLE
                    for m in ctx.members:
                        t_tot = (
                            costmodel.comp_time(m.cost, cfg.tau, cfg.batch_size, deltas[m.learner])
                            + costmodel.comm_time(m.cost)
                        )
                        if t_tot > t_max:
                            excluded[m.learner] = "deadline"
                    u_mml = {m.learner: member_utility(ctx, m, cfg.i_comp_max, deltas[m.learner])
                             for m in ctx.members}
                    plan.update(
                        i_comp=cfg.i_comp_max, deltas=deltas, cases=cases,
                        u_msp=msp_utility(ctx, cfg.i_comp_max, deltas, cfg.eta), u_mml=u_mml,
                    )
            plan["participants"] = [i for i in members if i not in excluded]
            plans.append(plan)
            if freq_rule == "stackelberg":
                self.i_comp_current[j] = plan["i_comp"]
        return plans

    # ----- the round itself ----------------------------------------------

    def run_round(self) -> RoundMetrics:
        cfg = self.config
        if self.round % cfg.chi == 0:
            self._refresh_embeddings()
        self._arrange_coalitions()
        if len(self.i_comp_current) != len(self.partition.coalitions):
            self.i_comp_current = [cfg.i_comp_max] * len(self.partition.coalitions)

        heads = self.partition.heads
        rep_matrix = self._rep_matrix(heads)
        similarity = self._similarity_matrix(heads)
        plans = self._solve_incentives(rep_matrix, similarity)

        # local meta-training and aggregation
        updates = {}
        contribs = {}
        for j, members in enumerate(self.partition.coalitions):
            for i in plans[j]["participants"]:
                prof = self.profiles[i]
                steps = cfg.tau if prof.honest else cfg.misbehavior_tau
                rng = _rng(cfg.seed, _T_TRAIN, self.round, i)
                model, contrib = local_update(
                    self.models[j], cfg.hyper(), self.shards[i].train, rng, tau=steps
                )
                updates.setdefault(j, []).append(model)
                contribs[i] = contrib
        for j, models in updates.items():
            self.models[j] = aggregate(models)

        # contributions, ledger, reputations
        theta_actual = {}
        times = {}
        for j, members in enumerate(self.partition.coalitions):
            plan = plans[j]
            for i in plan["participants"]:
                prof = self.profiles[i]
                steps = cfg.tau if prof.honest else cfg.misbehavior_tau
                t_comp = costmodel.comp_time(prof.cost, steps, cfg.batch_size, plan["deltas"][i])
                t_comm = costmodel.comm_time(prof.cost)
                times[i] = (t_comp, t_comm)
                theta_actual[i] = contribution(contribs[i].u, plan["t_max"], t_comp, t_comm)

        honest_thetas = [
            theta_actual[i] for i in theta_actual if self.profiles[i].honest
        ]
        reported = {}
        for i, theta in theta_actual.items():
            if cfg.ledger_on or self.profiles[i].honest:
                reported[i] = theta
            else:
                pool = honest_thetas if honest_thetas else list(theta_actual.values())
                reported[i] = max(pool)

        records = []
        if self.round == 0:
            records.append(
                ledger.RecruitmentRecord(
                    round=0, r_th=cfg.r_th, i_rep=cfg.i_rep,
                    i_comp_min=cfg.i_comp_min, i_comp_max=cfg.i_comp_max, tau=cfg.tau,
                )
            )
        records.append(
            ledger.PartitionCommitRecord(
                round=self.round,
                coalitions=[sorted(c) for c in self.partition.coalitions],
                heads=[-1 if h is None else h for h in self.partition.heads],
                parked=sorted(self.partition.parked),
            )
        )
        for j, plan in enumerate(plans):
            ids = sorted(plan["deltas"])
            records.append(
                ledger.EquilibriumRecord(
                    round=self.round, coalition=j, i_comp=float(plan["i_comp"]),
                    u_msp=float(plan["u_msp"]), learners=ids,
                    deltas=[float(plan["deltas"][i]) for i in ids],
                    kkt_cases=[int(plan["cases"][i]) for i in ids],
                )
            )
        head_of = {}
        for j, members in enumerate(self.partition.coalitions):
            for i in members:
                head_of[i] = self.partition.heads[j]
        for i in sorted(reported):
            self.rep_store.record(i, head_of[i], self.round, reported[i])
            records.append(
                ledger.ContributionRecord(
                    learner=i, head=head_of[i], round=self.round, theta=reported[i],
                    u=float(np.clip(contribs[i].u, -1.0, 1.0)),
                    t_comp=times[i][0], t_comm=times[i][1],
                )
            )
        for i in sorted(reported):
            records.append(
                ledger.ReputationUpdateRecord(
                    learner=i, round=self.round, r_global=self.rep_store.global_rep(i)
                )
            )
        if self.chain is not None:
            self.chain.append(self.round, records)

        metrics = self._collect_metrics(plans, theta_actual, reported)
        self.metrics.append(metrics)

        # parked learners rejoin their old coalition for the next round
        if self.partition.parked:
            coalitions = [list(c) for c in self.partition.coalitions]
            homes = {}
            for (i, j_from, j_to, _du) in self.partition.switches:
                homes[i] = j_from
            for i in self.partition.parked:
                j = homes.get(i, 0)
                coalitions[j] = sorted(coalitions[j] + [i])
            self.partition = PartitionState(
                coalitions=coalitions, heads=list(self.partition.heads), round=self.round
            )
        self.round += 1
        return metrics

    # ----- metrics ---------------------------------------------------------

    def _collect_metrics(self, plans, theta_actual, reported) -> RoundMetrics:
        cfg = self.config
        hyper = cfg.hyper()
        coalition_rows = []
        learner_rows = []
        for j, members in enumerate(self.partition.coalitions):
            plan = plans[j]
            model = self.models[j]
            acc_before, acc_after, losses, payoffs, lat_terms = [], [], [], [], []
            for i in sorted(members):
                shard = self.shards[i]
                prof = self.profiles[i]
                participated = i in plan["participants"]
                if participated:
                    before = accuracy(model, shard.test.features, shard.test.labels)
                    adapted = personalize(
                        model, hyper, (shard.train.features, shard.train.labels),
                        steps=cfg.personalization_steps,
                    )
                    after = accuracy(adapted, shard.test.features, shard.test.labels)
                    _, loss_after = forward(adapted, shard.test.features, shard.test.labels)
                    self.last_acc_before[i] = before
                    self.last_acc_after[i] = after
                    steps = cfg.tau if prof.honest else cfg.misbehavior_tau
                    delta = plan["deltas"][i]
                    promised = plan["u_mml"].get(i, 0.0)
                    payoff = promised + (
                        costmodel.comp_energy(prof.cost, cfg.tau, cfg.batch_size, delta)
                        - costmodel.comp_energy(prof.cost, steps, cfg.batch_size, delta)
                    )
                    t_comp, t_comm = (
                        costmodel.comp_time(prof.cost, steps, cfg.batch_size, delta),
                        costmodel.comm_time(prof.cost),
                    )
                    lat_terms.append((t_comp, t_comm))
                    losses.append(loss_after)
                    acc_before.append(before)
                    acc_after.append(after)
                else:
                    if i not in self.last_acc_after:
                        before = accuracy(model, shard.test.features, shard.test.labels)
                        adapted = personalize(
                            model, hyper, (shard.train.features, shard.train.labels),
                            steps=cfg.personalization_steps,
                        )
                        self.last_acc_before[i] = before
                        self.last_acc_after[i] = accuracy(
                            adapted, shard.test.features, shard.test.labels
                        )
                    if cfg.count_stale_accuracy:
                        acc_before.append(self.last_acc_before[i])
                        acc_after.append(self.last_acc_after[i])
                    payoff = 0.0
                learner_rows.append(
                    {
                        "learner": i,
                        "coalition": j,
                        "participated": participated,
                        "honest": prof.honest,
                        "payoff": payoff,
                        "reputation": self.rep_store.global_rep(i),
                        "delta": plan["deltas"].get(i, 0.0),
                        "kkt_case": plan["cases"].get(i, KKT_NOT_APPLICABLE),
                        "theta": theta_actual.get(i, 0.0),
                        "theta_reported": reported.get(i, 0.0),
                        "excluded": plan["excluded"].get(i, ""),
                    }
                )
                if participated:
                    payoffs.append(payoff)
            coalition_rows.append(
                {
                    "round": self.round,
                    "coalition": j,
                    "head": plan["head"] if plan["head"] is not None else -1,
                    "n_members": len(members),
                    "n_participants": len(plan["participants"]),
                    "accuracy_before": float(np.mean(acc_before)) if acc_before else 0.0,
                    "accuracy_after": float(np.mean(acc_after)) if acc_after else 0.0,
                    "loss_after": float(np.mean(losses)) if losses else 0.0,
                    "latency": costmodel.round_latency(lat_terms) if lat_terms else 0.0,
                    "u_msp": float(plan["u_msp"]),
                    "i_comp_star": float(plan["i_comp"]),
                    "mean_payoff": float(np.mean(payoffs)) if payoffs else 0.0,
                    "mean_reputation": float(
                        np.mean([self.rep_store.global_rep(i) for i in members])
                    ) if members else 0.0,
                }
            )
        for i in sorted(self.partition.parked):
            learner_rows.append(
                {
                    "learner": i, "coalition": -1, "participated": False,
                    "honest": self.profiles[i].honest, "payoff": 0.0,
                    "reputation": self.rep_store.global_rep(i), "delta": 0.0,
                    "kkt_case": KKT_NOT_APPLICABLE, "theta": 0.0,
                    "theta_reported": 0.0, "excluded": "parked",
                }
            )
        return RoundMetrics(self.round, coalition_rows, learner_rows)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list
    summary: dict
    state: ExperimentState


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run the configured number of rounds and summarize."""
    state = ExperimentState(config)
    for _ in range(config.rounds):
        state.run_round()
    summary = summarize(state)
    return ExperimentResult(config=config, metrics=state.metrics, summary=summary, state=state)


def summarize(state: ExperimentState) -> dict:
    latencies = []
    msp = []
    acc_rounds = []
    payoffs = []
    for rm in state.metrics:
        live = [row["latency"] for row in rm.coalition_rows if row["n_participants"] > 0]
        if live:
            latencies.append(max(live))
        msp.append(sum(row["u_msp"] for row in rm.coalition_rows))
        accs = [row["accuracy_after"] for row in rm.coalition_rows if row["n_members"] > 0]
        if accs:
            acc_rounds.append(float(np.mean(accs)))
        payoffs.extend(row["payoff"] for row in rm.learner_rows)
    final_acc = (
        float(np.mean([state.last_acc_after[i] for i in state.active_ids
                       if i in state.last_acc_after]))
        if state.last_acc_after
        else 0.0
    )
    return {
        "strategy": state.config.strategy,
        "rounds": state.config.rounds,
        "seed": state.config.seed,
        "final_personalized_accuracy": final_acc,
        "mean_personalized_accuracy": float(np.mean(acc_rounds)) if acc_rounds else 0.0,
        "mean_round_latency": float(np.mean(latencies)) if latencies else 0.0,
        "mean_msp_utility": float(np.mean(msp)) if msp else 0.0,
        "mean_payoff_per_learner": float(np.mean(payoffs)) if payoffs else 0.0,
    }


def evaluate_passive(
    models: list,
    passive_shards: list,
    sample_counts: list,
    hyper: MetaHyper,
    seed: int = 0,
) -> dict:
    """Few-shot value of the delivered meta-model for passive devices.

    The head models are averaged into one meta-initialization; each
    passive shard personalizes it with n support samples (one gradient
    step; n=0 means no adaptation) and reports test accuracy.  Returns
    {n: mean accuracy over shards}.
    """
    meta = aggregate(models)
    table = {}
    for n in sample_counts:
        accs = []
        for k, shard in enumerate(passive_shards):
            if n == 0:
                model = meta
            else:
                take = min(n, len(shard.train))
                idx = _rng(seed, _T_PASSIVE, k, n).permutation(len(shard.train))[:take]
                model = personalize(
                    meta, hyper,
                    (shard.train.features[idx], shard.train.labels[idx]),
                    steps=1,
                )
            accs.append(accuracy(model, shard.test.features, shard.test.labels))
        table[n] = float(np.mean(accs))
    return table


# ----- file outputs ------------------------------------------------------


def write_metrics_csv(metrics: list, path: str) -> None:
    """One row per round per coalition; floats as repr for byte-stable output."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for rm in metrics:
            for row in rm.coalition_rows:
                writer.writerow(
                    [repr(row[c]) if isinstance(row[c], float) else row[c]
                     for c in METRICS_COLUMNS]
                )


def write_partition_trace(state: ExperimentState, metrics: list, path: str) -> None:
    with open(path, "w") as f:
        for rm in metrics:
            payload = {
                "round": rm.round,
                "switches": [],
                "final_partition": [],
                "heads": [],
                "parked": [],
            }
            f.write(json.dumps(payload, sort_keys=True) + "\n")


def config_from_file(path: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse a key=value config file (UTF-8, # comments, blank lines ok)."""
    values = {}
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigInvalid(f"cannot read config: {e}") from e
    field_types = {f.name: f.type for f in fields(ExperimentConfig)}
    defaults = ExperimentConfig()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigInvalid(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in field_types:
            raise ConfigInvalid(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value, getattr(defaults, key), lineno, path)
    if overrides:
        values.update(overrides)
    try:
        config = ExperimentConfig(**values)
        config.validate()
    except TypeError as e:
        raise ConfigInvalid(str(e)) from e
    return config


def _coerce(key, text, default, lineno, path):
    try:
        if isinstance(default, bool):
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as e:
        raise ConfigInvalid(f"{path}:{lineno}: {e}") from e


def config_to_dict(config: ExperimentConfig) -> dict:
    return asdict(config)
