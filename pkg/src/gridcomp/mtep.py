"""Multi-timescale energy planning (MTEP) controller.

At each coarse interval boundary the planner commits an ahead-of-time
energy purchase per BS by running a stochastic subgradient descent on the
interval's planning objective: the ahead-of-time trading cost plus the
expected real-time slot cost, the latter estimated by resampling past
real-time realizations and solving their slot subproblems. Within the
interval the single-timescale controller runs with the committed plan
delivered evenly across slots.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import conic
from .model import (
    NetworkConfig,
    RunMetrics,
    SlotRandomness,
    bs_power,
    slot_cost_mtep,
)
from .scenario import Trace
from .twet import (
    SlotInfeasibleError,
    TwetController,
    TwetParams,
    _count_battery_violations,
    _count_slot_violations,
    stationary_battery_level,
)

__all__ = [
    "PlannerParams",
    "RtHistory",
    "subgrad_lt",
    "subgrad_rt",
    "plan_interval",
    "run",
]

# relative width of the band around the cost kink treated as the
# subdifferential boundary (solver output is only tol-accurate)
KINK_BAND = 1e-7


@dataclass(frozen=True)
class PlannerParams:
    """Stochastic subgradient knobs for the per-interval planning step.

    step_scale None derives mu0 from the energy scale of an interval and
    the mean real-time price (normalized by the penalty weight, which
    multiplies every subgradient); the schedule is mu0/j. Planning only
    starts once `history_min` past slots are available, otherwise the
    plan falls back to the interval's harvest (trade nothing ahead).
    """

    max_iters: int = 50
    step_scale: Optional[float] = None
    history_min: int = 10
    history_capacity: int = 4000
    solve_tol: float = 1e-6


class RtHistory:
    """Ring buffer of observed real-time realizations (prices, channels).

    The run loop appends slots only after acting on them, so at any
    planning instant the buffer holds strictly-past slots.
    """

    def __init__(self, capacity: int = 4000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self._buf = deque(maxlen=capacity)

    def append(self, slot: SlotRandomness) -> None:
        self._buf.append(slot)

    def sample(self, rng: np.random.Generator) -> SlotRandomness:
        if not self._buf:
            raise IndexError("cannot sample from empty history")
        return self._buf[int(rng.integers(len(self._buf)))]

    def __len__(self) -> int:
        return len(self._buf)


def subgrad_lt(planned, harvested, buy_lt: float, sell_lt: float):
    """Subgradient of the ahead-of-time trading cost at the planned amount.

    Buying slope above the harvest, selling slope below it, midpoint of
    the subdifferential on the kink. Vectorizes over BSs.
    """
    if not (buy_lt >= sell_lt >= 0.0):
        raise ValueError(f"need buy >= sell >= 0, got {buy_lt}, {sell_lt}")
    e = np.asarray(planned, dtype=float)
    a = np.asarray(harvested, dtype=float)
    out = np.where(e > a, buy_lt, np.where(e < a, sell_lt, 0.5 * (buy_lt + sell_lt)))
    return float(out) if out.ndim == 0 else out


def subgrad_rt(
    planned,
    slot: SlotRandomness,
    queues,
    penalty_weight: float,
    cfg: NetworkConfig,
    solve_tol: float = 1e-6,
) -> np.ndarray:
    """Per-BS subgradient of the sampled real-time slot value w.r.t. the plan.

    Solves the slot subproblem with the plan delivered evenly, then reads
    off which side of the cost kink the plan's per-slot share lands on:
    above the optimal net consumption the marginal planned kWh displaces a
    sale, below it a purchase. On the kink itself, when the battery is
    absorbing the marginal kWh (charge strictly inside its box), the
    envelope slope of the sampled objective is the queue's marginal value
    Q/(V*T) -- a specific element of the subdifferential; using the
    midpoint there erases the battery-state feedback and lets plans drift.
    """
    T = cfg.interval_len
    e = np.broadcast_to(np.asarray(planned, dtype=float), (cfg.num_bs,))
    q = np.broadcast_to(np.asarray(queues, dtype=float), (cfg.num_bs,))
    prog = conic.build_slot_program(
        cfg, slot.channels, slot.buy_price, slot.sell_price,
        supply=e / T, penalty_weight=penalty_weight, queues=q,
    )
    sol = conic.solve(prog, tol=solve_tol)
    if sol.status != "optimal":
        raise SlotInfeasibleError(
            f"planning subproblem ended with status {sol.status!r}"
        )
    w = conic.extract_beamformers(prog, sol.x)
    pb = conic.extract_charges(prog, sol.x)
    delta = np.array([
        cfg.circuit_power + bs_power(w, i, cfg) + pb[i] for i in range(cfg.num_bs)
    ])
    diff = e / T - delta
    band = KINK_BAND * np.maximum(1.0, np.abs(delta))
    alpha, beta = slot.buy_price, slot.sell_price
    v = float(penalty_weight)
    if v > 0:
        pb_margin = 1e-6 * max(1.0, cfg.charge_max - cfg.charge_min)
        interior = (pb > cfg.charge_min + pb_margin) & (pb < cfg.charge_max - pb_margin)
        kink_slope = np.clip(q / (v * T), -alpha / T, -beta / T)
    else:
        interior = np.zeros(cfg.num_bs, dtype=bool)
        kink_slope = np.zeros(cfg.num_bs)
    midpoint = -(alpha + beta) / (2.0 * T)
    on_kink = np.where(interior, kink_slope, midpoint)
    grad = np.where(
        diff > band, -beta / T,
        np.where(diff < -band, -alpha / T, on_kink),
    )
    return grad


DEFAULT_STEP_DAMPING = 0.1


def default_step_scale(trace_params, cfg: NetworkConfig, penalty_weight: float) -> float:
    """mu0 heuristic: damped interval energy scale over price scale.

    Subgradients carry a factor V, so the raw step shrinks with V. The
    damping matters: the per-interval planning objective is piecewise
    linear, so its exact optimum sits at the battery's absorption edge and
    fully-converged replanning relay-oscillates between charge and drain
    plans (costly churn when the feasibility band is only a few interval
    swings wide); moving the warm-started plan partway per interval
    shrinks that limit cycle proportionally.
    """
    e_scale = cfg.interval_len * max(trace_params.res_rate, cfg.circuit_power + 1.0)
    return (DEFAULT_STEP_DAMPING * e_scale
            / (trace_params.mean_buy_rt * max(penalty_weight, 1.0)))


def plan_interval(
    queues,
    buy_lt: float,
    sell_lt: float,
    harvested,
    history: RtHistory,
    params: PlannerParams,
    cfg: NetworkConfig,
    penalty_weight: float,
    rng: np.random.Generator,
    e_init,
    step_scale: float,
) -> np.ndarray:
    """Ahead-of-time plan for one interval via stochastic subgradient.

    Runs `max_iters` projected iterations with stepsize step_scale/j,
    sampling one past real-time realization per iteration, and returns the
    average of the iterates. Iterates are projected onto the plan box
    [0, max(T*max_plan_rate, harvest)]. With insufficient history the plan
    falls back to the harvested amount.
    """
    harvested = np.broadcast_to(np.asarray(harvested, dtype=float), (cfg.num_bs,))
    if len(history) < params.history_min:
        return np.maximum(harvested.copy(), 0.0)
    T = cfg.interval_len
    hi = np.maximum(T * cfg.max_plan_rate, harvested)
    e = np.clip(np.asarray(e_init, dtype=float).copy(), 0.0, hi)
    if params.max_iters == 0:
        return e
    v = float(penalty_weight)
    total = np.zeros_like(e)
    for j in range(1, params.max_iters + 1):
        slot = history.sample(rng)
        g = v * (
            subgrad_lt(e, harvested, buy_lt, sell_lt)
            + T * subgrad_rt(e, slot, queues, v, cfg, params.solve_tol)
        )
        e = np.clip(e - (step_scale / j) * g, 0.0, hi)
        total += e
    return total / params.max_iters


def run(
    trace: Trace,
    twet_params: Optional[TwetParams] = None,
    planner_params: Optional[PlannerParams] = None,
    battery0=None,
    sample_seed: Optional[int] = None,
) -> RunMetrics:
    """Run the planning controller over a two-timescale trace.

    Per interval: plan (causally, from past real-time draws), then run the
    per-slot controller with the plan spread evenly; slot costs carry the
    amortized ahead-of-time leg. Feasibility constants use the planning
    variant (interval-scaled charge excursions).
    """
    cfg = trace.config
    twet_params = twet_params or TwetParams()
    planner_params = planner_params or PlannerParams()
    alpha_bar, beta_floor = trace.params.price_bounds()
    controller = TwetController(
        cfg, twet_params, alpha_bar, beta_floor, interval_len=cfg.interval_len
    )
    if battery0 is None:
        battery0 = stationary_battery_level(
            cfg, controller.V, controller.perturbation, trace.params.mean_buy_lt
        )
    if sample_seed is None:
        sample_seed = trace.params.seed
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=int(sample_seed) & (2**63 - 1), spawn_key=(101,)
    ))
    step_scale = (planner_params.step_scale
                  if planner_params.step_scale is not None
                  else default_step_scale(trace.params, cfg, controller.V))

    t0 = time.perf_counter()
    state = controller.init(battery0)
    history = RtHistory(planner_params.history_capacity)
    T = cfg.interval_len
    n_slots = trace.num_slots
    costs = np.zeros(n_slots)
    battery = np.zeros((n_slots + 1, cfg.num_bs))
    battery[0] = state.battery
    pbs = np.zeros((n_slots, cfg.num_bs))
    plans = np.zeros((trace.num_intervals, cfg.num_bs))
    violations = {"battery": 0, "sinr": 0, "power_cap": 0}
    prev_plan = None
    for n, interval in enumerate(trace.intervals):
        plan = plan_interval(
            queues=state.virtual_queue,
            buy_lt=interval.buy_price_lt,
            sell_lt=interval.sell_price_lt,
            harvested=interval.res_arrivals,
            history=history,
            params=planner_params,
            cfg=cfg,
            penalty_weight=controller.V,
            rng=rng,
            e_init=interval.res_arrivals if prev_plan is None else prev_plan,
            step_scale=step_scale,
        )
        plans[n] = plan
        prev_plan = plan
        state.plan = plan
        for j in range(T):
            t = n * T + j
            slot = trace.slots[t]
            res = controller.step(state, slot, supply=plan / T)
            state = res.state
            state.plan = plan
            per_bs = [
                slot_cost_mtep(
                    plan[i], interval.res_arrivals[i],
                    (interval.buy_price_lt, interval.sell_price_lt),
                    (slot.buy_price, slot.sell_price),
                    res.consumption[i], res.charges[i], T,
                )
                for i in range(cfg.num_bs)
            ]
            costs[t] = float(np.sum(per_bs))
            battery[t + 1] = state.battery
            pbs[t] = res.charges
            _count_slot_violations(cfg, slot, res, violations)
            history.append(slot)
    _count_battery_violations(cfg, battery, violations)
    return RunMetrics(
        avg_cost=float(np.mean(costs)) if n_slots else float("nan"),
        cost_series=costs,
        battery_series=battery,
        mean_pb=pbs.mean(axis=0) if n_slots else np.zeros(cfg.num_bs),
        violations=violations,
        wall_time_s=time.perf_counter() - t0,
        extra={
            "V": controller.V,
            "v_max": controller.v_max,
            "m_const": controller.m_const,
            "perturbation": controller.perturbation,
            "plans": plans,
            "empty": n_slots == 0,
            "pb_series": pbs,
        },
    )
