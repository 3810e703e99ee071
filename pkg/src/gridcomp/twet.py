"""Single-timescale two-way energy trading (TWET) controller.

Online policy: each slot it observes prices/channels/harvest, solves the
per-slot conic subproblem weighted by the virtual queues, trades with the
grid, (dis)charges the batteries, and shifts the queues along with them.
With the feasibility-preserving queue perturbation and a penalty weight
below the capacity-derived cap, battery bounds hold at every slot and the
long-run average cost lands within an O(1/V) band of the offline optimum.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from . import conic
from .model import (
    Beamformers,
    ControllerState,
    NetworkConfig,
    RunMetrics,
    SlotRandomness,
    bs_power,
    battery_step,
    sinr,
    transaction_cost,
)
from .scenario import Trace

__all__ = [
    "TwetParams",
    "StepResult",
    "SlotInfeasibleError",
    "feasibility_constants",
    "stationary_battery_level",
    "TwetController",
    "init",
    "step",
    "run",
]

SOLVE_TOL = 1e-6
# slack for re-checking constraints on solver output; acceptance-level
RECHECK_TOL = 1e-6


class SlotInfeasibleError(RuntimeError):
    """A slot's subproblem could not be solved to optimality."""


def stationary_battery_level(cfg: NetworkConfig, penalty_weight: float,
                             perturbation: float, anchor_price: float) -> float:
    """Battery level whose implied price threshold equals `anchor_price`.

    The controller charges roughly when the buying price is below
    -Q/V; starting where that threshold sits at a typical "cheap" price
    avoids a long charge-up (or drain) transient whose terminal inventory
    distorts finite-horizon cost averages.
    """
    level = -perturbation - penalty_weight * anchor_price
    return float(min(max(level, cfg.battery_min), cfg.battery_max))


def feasibility_constants(cfg: NetworkConfig, alpha_bar: float, beta_floor: float,
                          interval_len: int = 1) -> Tuple[float, float]:
    """Drift bound M and penalty cap V_max of the feasibility guarantee.

    interval_len=1 gives the single-timescale constants; passing the
    planning interval length T scales the charge excursion term by T (the
    planning variant's constants).
    """
    if not alpha_bar > beta_floor >= 0:
        raise ValueError("need alpha_bar > beta_floor >= 0")
    T = int(interval_len)
    swing = max(cfg.charge_max, -cfg.charge_min)
    m_const = 0.5 * T * cfg.num_bs * swing**2
    headroom = cfg.battery_max - cfg.battery_min + T * (cfg.charge_min - cfg.charge_max)
    v_max = headroom / (alpha_bar - beta_floor)
    return m_const, v_max


@dataclass(frozen=True)
class TwetParams:
    """Controller knobs.

    penalty_weight None derives V = v_fraction * V_max from the price
    bounds; perturbation "auto" uses the feasibility-preserving shift
    -V*alpha_bar + charge_min - battery_min. With v_cap_check, exceeding
    V_max is an error; otherwise it only warns.
    """

    penalty_weight: Optional[float] = None
    perturbation: Union[float, str] = "auto"
    v_cap_check: bool = True
    v_fraction: float = 0.9
    solve_tol: float = SOLVE_TOL


@dataclass
class StepResult:
    beamformers: Beamformers
    charges: np.ndarray       # applied P_b per BS
    consumption: np.ndarray   # total per-BS consumption P_c + P_x
    slot_cost: float          # unweighted transaction cost, summed over BSs
    state: ControllerState


class TwetController:
    """Holds static data (config, price bounds, derived constants).

    `alpha_bar` / `beta_floor` must come from causal knowledge (scenario
    price cap and sell-ratio floor), not realized trace extrema.
    """

    def __init__(self, cfg: NetworkConfig, params: TwetParams,
                 alpha_bar: float, beta_floor: float,
                 interval_len: int = 1):
        self.cfg = cfg
        self.params = params
        self.alpha_bar = float(alpha_bar)
        self.beta_floor = float(beta_floor)
        self.m_const, self.v_max = feasibility_constants(
            cfg, alpha_bar, beta_floor, interval_len
        )
        if self.v_max <= 0:
            raise ValueError(
                "battery headroom too small for any feasible penalty weight "
                f"(V_max = {self.v_max:.6g})"
            )
        if params.penalty_weight is None:
            self.V = params.v_fraction * self.v_max
        else:
            self.V = float(params.penalty_weight)
        if self.V < 0:
            raise ValueError("penalty weight must be nonnegative")
        if self.V > self.v_max * (1 + 1e-12):
            msg = (f"penalty weight V={self.V:.6g} exceeds feasibility cap "
                   f"V_max={self.v_max:.6g}; battery bounds are no longer guaranteed")
            if params.v_cap_check:
                raise ValueError(msg)
            warnings.warn(msg)
        if params.perturbation == "auto":
            self.perturbation = (-self.V * self.alpha_bar
                                 + interval_len * cfg.charge_min - cfg.battery_min)
        else:
            self.perturbation = float(params.perturbation)

    def init(self, battery0) -> ControllerState:
        c0 = np.broadcast_to(np.asarray(battery0, dtype=float), (self.cfg.num_bs,)).copy()
        if np.any(c0 < self.cfg.battery_min) or np.any(c0 > self.cfg.battery_max):
            raise ValueError(f"initial battery {c0} outside bounds")
        return ControllerState(
            battery=c0,
            virtual_queue=c0 + self.perturbation,
            perturbation=self.perturbation,
            penalty_weight=self.V,
        )

    def step(self, state: ControllerState, slot: SlotRandomness,
             supply=None) -> StepResult:
        """One slot: solve, trade, (dis)charge, shift queues.

        `supply` overrides the slot's harvested amount (the planning
        controller passes the committed per-slot plan here).
        """
        cfg = self.cfg
        a = np.asarray(slot.res_arrivals if supply is None else supply, dtype=float)
        a = np.broadcast_to(a, (cfg.num_bs,))
        prog = conic.build_slot_program(
            cfg, slot.channels, slot.buy_price, slot.sell_price,
            supply=a, penalty_weight=self.V, queues=state.virtual_queue,
        )
        sol = conic.solve(prog, tol=self.params.solve_tol)
        if sol.status != "optimal":
            raise SlotInfeasibleError(
                f"slot subproblem ended with status {sol.status!r} "
                f"(solver: {sol.info.get('solver_status')})"
            )
        w = conic.extract_beamformers(prog, sol.x)
        pb = np.clip(conic.extract_charges(prog, sol.x), cfg.charge_min, cfg.charge_max)
        consumption = np.array([
            cfg.circuit_power + bs_power(w, i, cfg) for i in range(cfg.num_bs)
        ])
        net = consumption - a + pb
        slot_cost = float(np.sum(transaction_cost(net, slot.buy_price, slot.sell_price)))
        battery = battery_step(state.battery, pb, cfg, tol=RECHECK_TOL)
        new_state = ControllerState(
            battery=battery,
            virtual_queue=battery + self.perturbation,
            perturbation=self.perturbation,
            penalty_weight=self.V,
            plan=state.plan,
        )
        return StepResult(w, pb, consumption, slot_cost, new_state)

    def run(self, trace: Trace, battery0=None) -> RunMetrics:
        """Run over a whole trace; the per-slot supply is the spread harvest."""
        cfg = self.cfg
        if battery0 is None:
            battery0 = stationary_battery_level(
                cfg, self.V, self.perturbation, trace.params.mean_buy_lt
            )
        t0 = time.perf_counter()
        state = self.init(battery0)
        n = trace.num_slots
        costs = np.zeros(n)
        battery = np.zeros((n + 1, cfg.num_bs))
        battery[0] = state.battery
        pbs = np.zeros((n, cfg.num_bs))
        violations = {"battery": 0, "sinr": 0, "power_cap": 0}
        for t, slot in enumerate(trace.slots):
            res = self.step(state, slot)
            state = res.state
            costs[t] = res.slot_cost
            battery[t + 1] = state.battery
            pbs[t] = res.charges
            _count_slot_violations(cfg, slot, res, violations)
        _count_battery_violations(cfg, battery, violations)
        return RunMetrics(
            avg_cost=float(np.mean(costs)) if n else float("nan"),
            cost_series=costs,
            battery_series=battery,
            mean_pb=pbs.mean(axis=0) if n else np.zeros(cfg.num_bs),
            violations=violations,
            wall_time_s=time.perf_counter() - t0,
            extra={
                "V": self.V,
                "v_max": self.v_max,
                "m_const": self.m_const,
                "perturbation": self.perturbation,
                "empty": n == 0,
                "pb_series": pbs,
            },
        )


def _count_slot_violations(cfg: NetworkConfig, slot: SlotRandomness,
                           res: StepResult, counters: dict) -> None:
    """Re-check SINR targets and consumption caps on the applied decision."""
    for k in range(cfg.num_users):
        achieved = sinr(slot.channels, res.beamformers, k, cfg.noise_vars[k])
        if achieved < cfg.sinr_targets[k] * (1.0 - RECHECK_TOL):
            counters["sinr"] += 1
    if np.isfinite(cfg.max_consumption):
        cap = cfg.max_consumption
        if np.any(res.consumption > cap + RECHECK_TOL * max(1.0, cap)):
            counters["power_cap"] += 1


def _count_battery_violations(cfg: NetworkConfig, battery: np.ndarray,
                              counters: dict) -> None:
    scale = max(1.0, cfg.battery_max - cfg.battery_min)
    tol = RECHECK_TOL * scale
    bad = np.any(battery < cfg.battery_min - tol) or np.any(battery > cfg.battery_max + tol)
    if bad:
        counters["battery"] += int(
            np.sum((battery < cfg.battery_min - tol) | (battery > cfg.battery_max + tol))
        )


def init(cfg: NetworkConfig, battery0, params: TwetParams,
         alpha_bar: float, beta_floor: float) -> ControllerState:
    """Functional wrapper: initial controller state with shifted queues."""
    return TwetController(cfg, params, alpha_bar, beta_floor).init(battery0)


def step(controller: TwetController, state: ControllerState,
         slot: SlotRandomness, supply=None) -> StepResult:
    return controller.step(state, slot, supply)


def run(trace: Trace, params: Optional[TwetParams] = None,
        battery0=None) -> RunMetrics:
    """Run the trading controller over a trace with scenario price bounds."""
    params = params or TwetParams()
    alpha_bar, beta_floor = trace.params.price_bounds()
    controller = TwetController(trace.config, params, alpha_bar, beta_floor)
    return controller.run(trace, battery0=battery0)
