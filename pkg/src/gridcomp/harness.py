"""Experiment orchestration: sweeps, metrics tables, CSV/SVG emission.

One experiment sweeps a single axis (battery capacity, SINR target,
harvest rate, or the penalty weight) over a grid; every (axis value,
seed) cell generates one trace that all requested policies consume, so
per-trace comparisons are exact. Rows aggregate to mean +/- standard
error per (axis value, policy).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import baselines, mtep, twet
from .model import NetworkConfig
from .scenario import ScenarioParams, Trace, generate_trace, trace_to_dict

__all__ = [
    "ALGORITHMS",
    "SWEEP_AXES",
    "ExperimentConfig",
    "RunRow",
    "AggRow",
    "ResultTable",
    "shared_initial_battery",
    "run_cell",
    "run_experiment",
    "emit_csv",
    "emit_agg_csv",
    "emit_plot",
    "table_checksum",
    "load_rows_csv",
    "default_experiment",
]

ALGORITHMS = ("twet", "mtep", "heu", "offline")
SWEEP_AXES = ("battery_capacity", "sinr_target", "harvest_rate", "V")

CSV_HEADER = ["axis", "axis_value", "seed", "algorithm", "avg_cost", "runtime_s"]


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one sweep experiment."""

    network: NetworkConfig = field(default_factory=NetworkConfig)
    scenario: ScenarioParams = field(default_factory=ScenarioParams)
    algorithms: tuple = ALGORITHMS
    sweep_axis: str = "battery_capacity"
    axis_grid: tuple = (40.0, 60.0, 80.0, 100.0, 120.0)
    num_seeds: int = 10
    num_intervals: int = 60
    master_seed: int = 2024
    planner_iters: int = 50
    name: str = "sweep"

    def __post_init__(self):
        if self.sweep_axis not in SWEEP_AXES:
            raise ValueError(f"unknown sweep axis {self.sweep_axis!r}")
        unknown = set(self.algorithms) - set(ALGORITHMS)
        if unknown:
            raise ValueError(f"unknown algorithms: {sorted(unknown)}")
        if len(self.axis_grid) == 0:
            raise ValueError("axis grid must be nonempty")
        if self.num_seeds < 1:
            raise ValueError("need at least one seed")
        if self.num_intervals < 1:
            raise ValueError("need at least one interval")
        if ("offline" in self.algorithms
                and self.num_intervals * self.network.interval_len
                > baselines.OFFLINE_MAX_SLOTS):
            raise ValueError(
                "offline baseline exceeds its horizon guard; shorten the "
                "experiment or drop 'offline'"
            )

    def cell_inputs(self, axis_value: float, seed_index: int):
        """(NetworkConfig, ScenarioParams, twet V override) for one cell.

        The per-cell scenario seed mixes the master seed with the cell
        coordinates through SeedSequence, so any subset of cells can be
        reproduced independently and in any order.
        """
        cfg = self.network
        sc = self.scenario
        v_override = None
        if self.sweep_axis == "battery_capacity":
            cfg = _replace_cfg(cfg, battery_max=float(axis_value))
        elif self.sweep_axis == "sinr_target":
            gamma = 10.0 ** (float(axis_value) / 10.0)  # grid is in dB
            cfg = _replace_cfg(cfg, sinr_targets=gamma)
        elif self.sweep_axis == "harvest_rate":
            sc = _replace_params(sc, res_rate=float(axis_value))
        elif self.sweep_axis == "V":
            v_override = float(axis_value)
        axis_index = list(self.axis_grid).index(axis_value)
        ss = np.random.SeedSequence(
            entropy=self.master_seed, spawn_key=(axis_index, seed_index)
        )
        cell_seed = int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)
        sc = _replace_params(sc, seed=cell_seed)
        return cfg, sc, v_override


def _replace_cfg(cfg: NetworkConfig, **kw) -> NetworkConfig:
    d = asdict(cfg)
    d.update(kw)
    return NetworkConfig(**d)


def _replace_params(sc: ScenarioParams, **kw) -> ScenarioParams:
    d = asdict(sc)
    d.update(kw)
    return ScenarioParams(**d)


@dataclass
class RunRow:
    axis: str
    axis_value: float
    seed: int
    algorithm: str
    avg_cost: float
    runtime_s: float
    violations: int = 0
    trace_checksum: str = ""
    error: str = ""


@dataclass
class AggRow:
    axis: str
    axis_value: float
    algorithm: str
    mean_cost: float
    stderr: float
    num_seeds: int


@dataclass
class ResultTable:
    config: ExperimentConfig
    rows: List[RunRow]
    aggregates: List[AggRow]

    def row_lookup(self) -> Dict[tuple, RunRow]:
        return {(r.axis_value, r.seed, r.algorithm): r for r in self.rows}

    def agg_lookup(self) -> Dict[tuple, AggRow]:
        return {(a.axis_value, a.algorithm): a for a in self.aggregates}


def shared_initial_battery(cfg: NetworkConfig, params: ScenarioParams,
                           penalty_weight: Optional[float] = None) -> float:
    """One initial charge for every policy on a cell's trace.

    The minimum of the two controllers' stationary levels: starting at or
    below a controller's own level costs a mild charge-up, while starting
    above it parks the planning controller in its discharge-and-sell zone.
    """
    alpha_bar, beta_floor = params.price_bounds()
    p = twet.TwetParams(penalty_weight=penalty_weight)
    levels = []
    for horizon in (1, cfg.interval_len):
        ctl = twet.TwetController(cfg, p, alpha_bar, beta_floor, interval_len=horizon)
        levels.append(twet.stationary_battery_level(
            cfg, ctl.V, ctl.perturbation, params.mean_buy_lt
        ))
    return min(levels)


def _trace_checksum(trace: Trace) -> str:
    payload = json.dumps(trace_to_dict(trace), separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def run_cell(config: ExperimentConfig, axis_value: float, seed_index: int) -> List[RunRow]:
    """Run every requested policy on one cell's shared trace.

    Failures become error rows instead of aborting the sweep. The offline
    benchmark runs last with its terminal floored at the lowest battery
    level any policy ended at, so it per-trace lower-bounds each of them.
    """
    cfg, sc, v_override = config.cell_inputs(axis_value, seed_index)
    trace = generate_trace(cfg, sc, config.num_intervals)
    checksum = _trace_checksum(trace)
    c0 = shared_initial_battery(cfg, sc, v_override)
    twet_params = twet.TwetParams(penalty_weight=v_override)
    planner_params = mtep.PlannerParams(max_iters=config.planner_iters)

    rows: List[RunRow] = []
    terminal_levels = [np.full(cfg.num_bs, c0)]

    def record(algo_name, fn):
        t0 = time.perf_counter()
        try:
            metrics = fn()
            rows.append(RunRow(
                axis=config.sweep_axis, axis_value=axis_value, seed=seed_index,
                algorithm=algo_name, avg_cost=metrics.avg_cost,
                runtime_s=time.perf_counter() - t0,
                violations=metrics.total_violations(),
                trace_checksum=checksum,
            ))
            return metrics
        except Exception as exc:  # noqa: BLE001 - sweep rows must survive
            rows.append(RunRow(
                axis=config.sweep_axis, axis_value=axis_value, seed=seed_index,
                algorithm=algo_name, avg_cost=float("nan"),
                runtime_s=time.perf_counter() - t0,
                trace_checksum=checksum, error=f"{type(exc).__name__}: {exc}",
            ))
            return None

    for algo in config.algorithms:
        if algo == "twet":
            m = record("twet", lambda: twet.run(trace, twet_params, battery0=c0))
            if m is not None:
                terminal_levels.append(m.battery_series[-1])
        elif algo == "mtep":
            m = record("mtep", lambda: mtep.run(
                trace, twet_params, planner_params, battery0=c0))
            if m is not None:
                terminal_levels.append(m.battery_series[-1])
        elif algo == "heu":
            record("heu", lambda: baselines.heuristic_run(trace, battery0=c0))
    if "offline" in config.algorithms:
        floor = np.minimum.reduce(terminal_levels)
        record("offline", lambda: baselines.offline_metrics(
            trace, battery0=c0, min_terminal=floor))
    return rows


def _aggregate(config: ExperimentConfig, rows: Sequence[RunRow]) -> List[AggRow]:
    aggs: List[AggRow] = []
    for axis_value in config.axis_grid:
        for algo in config.algorithms:
            costs = np.array([
                r.avg_cost for r in rows
                if r.axis_value == axis_value and r.algorithm == algo
                and not r.error
            ])
            if costs.size == 0:
                continue
            stderr = float(costs.std(ddof=1) / math.sqrt(costs.size)) if costs.size > 1 else 0.0
            aggs.append(AggRow(
                axis=config.sweep_axis, axis_value=float(axis_value),
                algorithm=algo, mean_cost=float(costs.mean()),
                stderr=stderr, num_seeds=int(costs.size),
            ))
    return aggs


def _cell_worker(args):
    config, axis_value, seed_index = args
    return run_cell(config, axis_value, seed_index)


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> ResultTable:
    """Execute the sweep; `jobs` > 1 fans cells out to worker processes.

    Cells are self-contained (per-cell seeds derive from the master seed
    and the cell coordinates), and rows are sorted before aggregation, so
    the emitted numbers are identical for any job count.
    """
    cells = [
        (config, axis_value, seed_index)
        for axis_value in config.axis_grid
        for seed_index in range(config.num_seeds)
    ]
    rows: List[RunRow] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cell_rows in pool.map(_cell_worker, cells):
                rows.extend(cell_rows)
    else:
        for args in cells:
            rows.extend(_cell_worker(args))
    grid = list(config.axis_grid)
    algo_order = {a: i for i, a in enumerate(ALGORITHMS)}
    rows.sort(key=lambda r: (grid.index(r.axis_value), r.seed, algo_order[r.algorithm]))
    return ResultTable(config=config, rows=rows, aggregates=_aggregate(config, rows))


def emit_csv(table: ResultTable, path) -> None:
    """Write per-run rows; header is fixed by the external interface."""
    if not table.rows:
        raise ValueError("refusing to write an empty result table")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in table.rows:
            writer.writerow([
                r.axis, repr(float(r.axis_value)), r.seed, r.algorithm,
                repr(float(r.avg_cost)), f"{r.runtime_s:.3f}",
            ])


def emit_agg_csv(table: ResultTable, path) -> None:
    if not table.aggregates:
        raise ValueError("refusing to write an empty aggregate table")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "axis_value", "algorithm", "mean_cost",
                         "stderr", "num_seeds"])
        for a in table.aggregates:
            writer.writerow([
                a.axis, repr(float(a.axis_value)), a.algorithm,
                repr(float(a.mean_cost)), repr(float(a.stderr)), a.num_seeds,
            ])


def load_rows_csv(path) -> List[RunRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected CSV header: {reader.fieldnames}")
        for rec in reader:
            rows.append(RunRow(
                axis=rec["axis"], axis_value=float(rec["axis_value"]),
                seed=int(rec["seed"]), algorithm=rec["algorithm"],
                avg_cost=float(rec["avg_cost"]),
                runtime_s=float(rec["runtime_s"]),
            ))
    return rows


def table_checksum(table: ResultTable) -> str:
    """SHA-256 over the deterministic row data.

    Wall-clock runtimes vary between repetitions by nature, so the
    checksum covers every column except runtime_s; this is what the
    determinism guarantee (same master seed => same digest, any job
    count) refers to.
    """
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow([c for c in CSV_HEADER if c != "runtime_s"])
    for r in table.rows:
        writer.writerow([
            r.axis, repr(float(r.axis_value)), r.seed, r.algorithm,
            repr(float(r.avg_cost)),
        ])
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()


_ALGO_STYLE = {
    "heu": dict(color="#c44e52", marker="s", label="no-storage heuristic"),
    "twet": dict(color="#4c72b0", marker="o", label="online trading (TWET)"),
    "mtep": dict(color="#55a868", marker="^", label="ahead planning (MTEP)"),
    "offline": dict(color="#8172b2", marker="d", label="clairvoyant offline"),
}

_AXIS_LABEL = {
    "battery_capacity": "battery capacity (kWh)",
    "sinr_target": "SINR target (dB)",
    "harvest_rate": "harvest rate (kWh/slot)",
    "V": "penalty weight V",
}


def emit_plot(table: ResultTable, path) -> None:
    """Mean +/- stderr curves per algorithm as an SVG (Agg backend)."""
    if not table.aggregates:
        raise ValueError("refusing to plot an empty result table")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    lookup = table.agg_lookup()
    grid = [float(v) for v in table.config.axis_grid]
    for algo in table.config.algorithms:
        pts = [(v, lookup[(v, algo)]) for v in grid if (v, algo) in lookup]
        if not pts:
            continue
        xs = [p[0] for p in pts]
        means = np.array([p[1].mean_cost for p in pts])
        errs = np.array([p[1].stderr for p in pts])
        style = _ALGO_STYLE[algo]
        ax.plot(xs, means, marker=style["marker"], color=style["color"],
                label=style["label"], markersize=4)
        ax.fill_between(xs, means - errs, means + errs,
                        color=style["color"], alpha=0.2, linewidth=0)
    ax.set_xlabel(_AXIS_LABEL.get(table.config.sweep_axis, table.config.sweep_axis))
    ax.set_ylabel("average transaction cost ($/slot)")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def default_experiment(name: str) -> ExperimentConfig:
    """Shipped sweep presets mirroring the three capacity/QoS/harvest plots."""
    if name == "fig2":
        return ExperimentConfig(
            sweep_axis="battery_capacity",
            axis_grid=(40.0, 60.0, 80.0, 100.0, 120.0),
            num_seeds=10, num_intervals=60, name="fig2",
        )
    if name == "fig3":
        return ExperimentConfig(
            sweep_axis="sinr_target",
            axis_grid=(1.0, 3.0, 5.0, 7.0, 9.0),
            num_seeds=6, num_intervals=40, name="fig3",
        )
    if name == "fig4":
        return ExperimentConfig(
            sweep_axis="harvest_rate",
            axis_grid=(0.4, 0.8, 1.2, 1.6),
            num_seeds=8, num_intervals=40, name="fig4",
        )
    raise ValueError(f"unknown preset {name!r}")


def experiment_config_to_dict(config: ExperimentConfig) -> dict:
    d = asdict(config)
    d["network"]["sinr_targets"] = list(config.network.sinr_targets)
    d["network"]["noise_vars"] = list(config.network.noise_vars)
    d["algorithms"] = list(config.algorithms)
    d["axis_grid"] = [float(v) for v in config.axis_grid]
    return d


def experiment_config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    net = data.pop("network", {})
    sc = data.pop("scenario", {})
    net = {k: (tuple(v) if isinstance(v, list) else v) for k, v in net.items()}
    cfg = ExperimentConfig(
        network=NetworkConfig(**net),
        scenario=ScenarioParams(**sc),
        algorithms=tuple(data.pop("algorithms", ALGORITHMS)),
        axis_grid=tuple(data.pop("axis_grid", ())),
        **data,
    )
    return cfg


def save_experiment_config(config: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(experiment_config_to_dict(config), fh, indent=2)
        fh.write("\n")


def load_experiment_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return experiment_config_from_dict(json.load(fh))
