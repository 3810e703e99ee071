"""Core physical model of a smart-grid powered CoMP downlink cluster.

A set of base stations (BSs) jointly beamforms to single-antenna users,
draws energy from the grid at a buying price, sells surplus back at a
(lower) selling price, harvests renewable energy, and buffers energy in
finite batteries. This module holds the static problem data, the per-slot
random data, and the closed-form cost/physics functions everything else
is built on. All functions here are pure.

Units: every energy quantity is kWh per slot (slot length normalized to
one, so energy and power are interchangeable); prices are $/kWh.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "NetworkConfig",
    "ChannelState",
    "Beamformers",
    "SlotRandomness",
    "IntervalRandomness",
    "ControllerState",
    "RunMetrics",
    "PowerCapError",
    "BatteryBoundsError",
    "transaction_cost",
    "bs_power",
    "total_consumption",
    "sinr",
    "battery_step",
    "slot_cost_mtep",
]


class PowerCapError(ValueError):
    """Total BS consumption exceeds its cap; carries the overshoot margin."""

    def __init__(self, bs: int, consumption: float, cap: float):
        self.bs = bs
        self.consumption = consumption
        self.cap = cap
        self.margin = consumption - cap
        super().__init__(
            f"BS {bs} consumption {consumption:.6g} kWh exceeds cap "
            f"{cap:.6g} kWh by {self.margin:.6g}"
        )


class BatteryBoundsError(ValueError):
    """A battery update would leave [C_min, C_max]; never clamped silently."""

    def __init__(self, level, lo: float, hi: float):
        self.level = level
        self.lo = lo
        self.hi = hi
        super().__init__(
            f"battery level {level} kWh outside [{lo:.6g}, {hi:.6g}]"
        )


@dataclass(frozen=True)
class NetworkConfig:
    """Static problem data for one CoMP cluster.

    Attributes:
        num_bs: number of coordinated base stations I.
        num_antennas: transmit antennas M per BS.
        num_users: single-antenna users K served jointly.
        sinr_targets: per-user SINR targets (linear ratios, not dB).
        noise_vars: per-user receiver noise variances.
        circuit_power: constant non-transmit consumption per BS, kWh/slot.
        max_consumption: per-BS total consumption cap, kWh/slot. The
            default is uncapped: with Gaussian fading and fixed SINR
            targets the minimum transmit power is heavy-tailed, so any
            moderate finite cap makes rare slots infeasible outright.
        battery_min / battery_max: state-of-charge bounds, kWh.
        charge_min / charge_max: per-slot (dis)charge bounds, kWh
            (charge_min < 0 < charge_max).
        interval_len: slots per coarse-grained planning interval T.
        max_plan_rate: cap on ahead-of-time energy purchases, kWh/slot per
            BS. Without it the clairvoyant benchmark is unbounded whenever
            a random interval prices real-time sales above the ahead
            buying price (buy ahead, sell back every slot); the online
            planner projects onto the same box so the feasible sets match.
    """

    num_bs: int = 2
    num_antennas: int = 2
    num_users: int = 3
    sinr_targets: tuple = 3.1622776601683795  # 5 dB; scalar broadcasts to all users
    noise_vars: tuple = 0.1
    circuit_power: float = 1.8
    max_consumption: float = float("inf")
    battery_min: float = 0.0
    battery_max: float = 60.0
    charge_min: float = -2.0
    charge_max: float = 2.0
    interval_len: int = 5
    max_plan_rate: float = 8.0

    def __post_init__(self):
        if self.num_bs < 1 or self.num_antennas < 1 or self.num_users < 0:
            raise ValueError("need num_bs >= 1, num_antennas >= 1, num_users >= 0")
        for name in ("sinr_targets", "noise_vars"):
            val = getattr(self, name)
            if np.isscalar(val):
                val = (float(val),) * self.num_users
            object.__setattr__(self, name, tuple(float(v) for v in val))
        if len(self.sinr_targets) != self.num_users:
            raise ValueError("sinr_targets length must equal num_users")
        if len(self.noise_vars) != self.num_users:
            raise ValueError("noise_vars length must equal num_users")
        if any(g <= 0 for g in self.sinr_targets):
            raise ValueError("SINR targets must be positive")
        if any(s <= 0 for s in self.noise_vars):
            raise ValueError("noise variances must be positive")
        if self.battery_min > self.battery_max:
            raise ValueError("battery_min must not exceed battery_max")
        if not (self.charge_min < 0.0 < self.charge_max):
            raise ValueError("need charge_min < 0 < charge_max")
        if self.circuit_power <= 0.0:
            raise ValueError("circuit_power must be positive")
        if not self.max_consumption > self.circuit_power:
            raise ValueError("max_consumption must exceed circuit_power")
        if self.interval_len < 1:
            raise ValueError("interval_len must be >= 1")
        if self.max_plan_rate <= 0:
            raise ValueError("max_plan_rate must be positive")

    @property
    def total_antennas(self) -> int:
        return self.num_bs * self.num_antennas

    def bs_rows(self, i: int) -> slice:
        """Row slice of the stacked channel/beamformer belonging to BS i."""
        if not 0 <= i < self.num_bs:
            raise IndexError(f"BS index {i} out of range [0, {self.num_bs})")
        return slice(i * self.num_antennas, (i + 1) * self.num_antennas)

    def gamma(self) -> np.ndarray:
        return np.asarray(self.sinr_targets, dtype=float)

    def noise(self) -> np.ndarray:
        return np.asarray(self.noise_vars, dtype=float)


def _check_matrix(mat: np.ndarray, cfg: Optional[NetworkConfig], what: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=complex)
    if mat.ndim != 2:
        raise ValueError(f"{what} must be a 2-D matrix, got shape {mat.shape}")
    if not np.all(np.isfinite(mat.real)) or not np.all(np.isfinite(mat.imag)):
        raise ValueError(f"{what} contains non-finite entries")
    if cfg is not None and mat.shape != (cfg.total_antennas, cfg.num_users):
        raise ValueError(
            f"{what} shape {mat.shape} does not match "
            f"(M*I, K) = ({cfg.total_antennas}, {cfg.num_users})"
        )
    return mat


@dataclass(frozen=True)
class ChannelState:
    """Stacked downlink channels; column k holds all BSs' vectors to user k."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _check_matrix(self.matrix, None, "channel matrix"))

    def column(self, k: int) -> np.ndarray:
        return self.matrix[:, k]


@dataclass(frozen=True)
class Beamformers:
    """Stacked transmit beamformers; column k is the vector serving user k."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _check_matrix(self.matrix, None, "beamformer matrix"))

    def column(self, k: int) -> np.ndarray:
        return self.matrix[:, k]


@dataclass(frozen=True)
class SlotRandomness:
    """One slot's random draw: prices, channels, and (spread) harvests."""

    buy_price: float
    sell_price: float
    channels: ChannelState
    res_arrivals: np.ndarray  # kWh/slot per BS; used in single-timescale mode

    def __post_init__(self):
        if not (self.buy_price >= self.sell_price >= 0.0):
            raise ValueError(
                f"need buy >= sell >= 0, got buy={self.buy_price}, sell={self.sell_price}"
            )
        object.__setattr__(
            self, "res_arrivals", np.asarray(self.res_arrivals, dtype=float)
        )


@dataclass(frozen=True)
class IntervalRandomness:
    """One coarse interval's draw: ahead-of-time prices and harvest amounts."""

    buy_price_lt: float
    sell_price_lt: float
    res_arrivals: np.ndarray  # kWh/interval per BS

    def __post_init__(self):
        if not (self.buy_price_lt >= self.sell_price_lt >= 0.0):
            raise ValueError(
                f"need buy >= sell >= 0, got buy={self.buy_price_lt}, "
                f"sell={self.sell_price_lt}"
            )
        object.__setattr__(
            self, "res_arrivals", np.asarray(self.res_arrivals, dtype=float)
        )


@dataclass
class ControllerState:
    """Mutable state carried across slots by the online controllers.

    The virtual queue shadows the battery: Q_i = C_i + perturbation at all
    times; `plan` holds the current interval's committed ahead-of-time
    energy (planning mode only).
    """

    battery: np.ndarray
    virtual_queue: np.ndarray
    perturbation: float
    penalty_weight: float
    plan: Optional[np.ndarray] = None

    def __post_init__(self):
        self.battery = np.asarray(self.battery, dtype=float).copy()
        self.virtual_queue = np.asarray(self.virtual_queue, dtype=float).copy()
        if self.battery.shape != self.virtual_queue.shape:
            raise ValueError("battery and virtual_queue shapes differ")
        if not np.allclose(
            self.virtual_queue, self.battery + self.perturbation, atol=1e-9
        ):
            raise ValueError("virtual queue must equal battery + perturbation")


@dataclass
class RunMetrics:
    """Outcome of one policy run over one trace."""

    avg_cost: float
    cost_series: np.ndarray           # $/slot, summed over BSs
    battery_series: np.ndarray        # (num_slots + 1, I) kWh
    mean_pb: np.ndarray               # time-averaged (dis)charge per BS
    violations: dict = field(default_factory=dict)
    wall_time_s: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return self.cost_series.size == 0

    def total_violations(self) -> int:
        return int(sum(self.violations.values()))


def transaction_cost(net_draw: float, buy: float, sell: float):
    """Per-slot energy transaction cost of a BS with net grid draw u.

    Positive u is a shortage bought at `buy`; negative u is a surplus sold
    at `sell`, so the returned value max{buy*u, sell*u} is negative revenue
    in that case. Convex and nondecreasing in u. Accepts scalars or arrays.
    """
    if not (buy >= sell >= 0.0):
        raise ValueError(f"need buy >= sell >= 0, got buy={buy}, sell={sell}")
    u = np.asarray(net_draw, dtype=float)
    out = np.maximum(buy * u, sell * u)
    return float(out) if out.ndim == 0 else out


def bs_power(w: Beamformers, i: int, cfg: NetworkConfig) -> float:
    """Transmit power of BS i: squared norm of its rows across all users."""
    mat = _check_matrix(w.matrix, cfg, "beamformer matrix")
    block = mat[cfg.bs_rows(i), :]
    return float(np.sum(np.abs(block) ** 2))


def total_consumption(w: Beamformers, i: int, cfg: NetworkConfig, tol: float = 0.0) -> float:
    """Total consumption of BS i (circuit + transmit).

    Raises PowerCapError (with the overshoot margin) if the cap is exceeded
    by more than `tol`.
    """
    p = cfg.circuit_power + bs_power(w, i, cfg)
    if p > cfg.max_consumption + tol:
        raise PowerCapError(i, p, cfg.max_consumption)
    return p


def sinr(h: ChannelState, w: Beamformers, k: int, noise_var: float) -> float:
    """SINR of user k under channels h and beamformers w."""
    if noise_var <= 0:
        raise ValueError("noise variance must be positive")
    hm = h.matrix
    wm = w.matrix
    if hm.shape != wm.shape:
        raise ValueError(f"channel shape {hm.shape} != beamformer shape {wm.shape}")
    gains = np.abs(hm[:, k].conj() @ wm) ** 2  # |h_k^H w_l|^2 for all l
    signal = gains[k]
    interference = float(np.sum(gains)) - float(signal)
    return float(signal / (interference + noise_var))


def battery_step(level, charge, cfg: NetworkConfig, tol: float = 0.0):
    """Advance battery state(s) by one slot: C' = C + P_b.

    This is a checker, not a projector: a result outside
    [battery_min - tol, battery_max + tol], or a charge outside its bounds,
    raises BatteryBoundsError / ValueError instead of clamping.
    Accepts scalars or per-BS arrays.
    """
    c = np.asarray(level, dtype=float)
    pb = np.asarray(charge, dtype=float)
    if np.any(pb < cfg.charge_min - tol) or np.any(pb > cfg.charge_max + tol):
        raise ValueError(
            f"charge {pb} outside [{cfg.charge_min}, {cfg.charge_max}]"
        )
    nxt = c + pb
    if np.any(nxt < cfg.battery_min - tol) or np.any(nxt > cfg.battery_max + tol):
        raise BatteryBoundsError(nxt, cfg.battery_min, cfg.battery_max)
    return float(nxt) if nxt.ndim == 0 else nxt


def slot_cost_mtep(
    planned: float,
    harvested: float,
    prices_lt: tuple,
    prices_rt: tuple,
    consumption: float,
    charge: float,
    interval_len: int,
) -> float:
    """Per-slot cost of one BS in planning mode.

    The ahead-of-time leg trades the planned-minus-harvested amount at the
    interval prices (amortized over the interval); the real-time leg trades
    the residual net draw at the slot prices, with the grid delivering the
    planned energy evenly across the interval.
    """
    if interval_len < 1:
        raise ValueError("interval_len must be >= 1")
    alpha_lt, beta_lt = prices_lt
    alpha_rt, beta_rt = prices_rt
    ahead = transaction_cost(planned - harvested, alpha_lt, beta_lt)
    residual = consumption - planned / interval_len + charge
    realtime = transaction_cost(residual, alpha_rt, beta_rt)
    return ahead / interval_len + realtime
