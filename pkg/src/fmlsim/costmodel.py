"""Computation/communication energy and time for one training round."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import EmptyCoalition, InvalidFrequency


@dataclass
class DeviceCost:
    """Per-device cost constants.

    rho: effective capacitance coefficient
    zeta: energy scale per cycle^2 (J s^2)
    cycles: CPU cycles needed per sample
    comm_a, comm_b, comm_z: transmission energy polynomial coefficients
    eps_loss: packet loss ratio in (0, 1)
    model_bits: model size W transmitted per round (bits)
    bandwidth: mean transmission rate B (bit/s)
    """

    rho: float = 0.1
    zeta: float = 1e-27
    cycles: float = 10.0
    comm_a: float = 0.0
    comm_b: float = 0.0
    comm_z: float = 1e-9
    eps_loss: float = 0.01
    model_bits: float = 1e7
    bandwidth: float = 7.5e6


def _check_delta(delta: float) -> None:
    if not delta > 0:
        raise InvalidFrequency(f"delta = {delta}")


def comp_energy(cost: DeviceCost, tau: int, batch: int, delta: float) -> float:
    """rho * tau * cycles * batch * zeta * delta^2  (Joules)."""
    _check_delta(delta)
    return cost.rho * tau * cost.cycles * batch * cost.zeta * delta * delta


def comp_time(cost: DeviceCost, tau: int, batch: int, delta: float) -> float:
    """tau * cycles * batch / delta  (seconds)."""
    _check_delta(delta)
    return tau * cost.cycles * batch / delta


def comm_energy(cost: DeviceCost, delta: float) -> float:
    """a*(delta/(1-eps))^2 + b*(delta/(1-eps)) + z  (Joules)."""
    _check_delta(delta)
    eff = delta / (1.0 - cost.eps_loss)
    return cost.comm_a * eff * eff + cost.comm_b * eff + cost.comm_z


def comm_time(cost: DeviceCost) -> float:
    """model_bits / bandwidth  (seconds)."""
    return cost.model_bits / cost.bandwidth


def round_latency(members: list) -> float:
    """Coalition round latency: max over members of comp_time + comm_time.

    members: list of (comp_time, comm_time) pairs for the participants.
    """
    if not members:
        raise EmptyCoalition("latency of an empty coalition")
    return max(tc + tx for tc, tx in members)
