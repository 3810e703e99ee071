"""Reproducible stochastic scenarios: prices, channels, harvest arrivals.

A Trace materializes every random quantity a run consumes, at both
timescales, so that all policies can be evaluated on byte-identical
randomness. Traces serialize to a self-describing JSON file.

Real-time buying prices, ahead-of-time buying prices, and harvest amounts
follow folded normal distributions around configured means; selling
prices are fixed ratios of the matching buying price. Channels are i.i.d.
unit-variance circularly-symmetric complex Gaussian entries, redrawn
every slot.
"""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, asdict
from typing import List, Union

import numpy as np

from .model import (
    ChannelState,
    IntervalRandomness,
    NetworkConfig,
    SlotRandomness,
)

TRACE_FORMAT_VERSION = 1

_LAYOUT_NOTE = (
    "H_re/H_im hold one list per user (column-major): each column stacks the "
    "per-BS antenna coefficients, BS-major (BS 0 antennas first)."
)


class TraceFormatError(ValueError):
    """Raised when a trace file is malformed or has the wrong version."""


@dataclass(frozen=True)
class ScenarioParams:
    """Knobs of the random scenario generator.

    sell_ratio_* set the selling price as a fraction of the drawn buying
    price; price_cap truncates buying-price draws and doubles as the price
    upper bound the controllers use for their feasibility constants.
    Ahead-of-time prices get their own (smaller) relative std: contract
    prices move far less than spot prices, and a volatile ahead price
    hands the clairvoyant benchmark a price-timing stockpile channel that
    swamps everything else as battery capacity grows.
    """

    mean_buy_rt: float = 2.3
    mean_buy_lt: float = 1.5
    sell_ratio_rt: float = 0.3
    sell_ratio_lt: float = 0.9
    price_rel_std: float = 0.28
    price_rel_std_lt: float = 0.0
    res_rate: float = 1.6          # kWh/slot per BS
    res_rel_std: float = 0.7
    price_cap: float = 6.9         # 3 x mean_buy_rt
    seed: int = 0

    def __post_init__(self):
        if not self.mean_buy_lt < self.mean_buy_rt:
            raise ValueError("ahead-of-time mean price must be below real-time mean")
        for name in ("sell_ratio_rt", "sell_ratio_lt"):
            r = getattr(self, name)
            if not 0.0 < r <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {r}")
        if self.mean_buy_rt <= 0 or self.mean_buy_lt <= 0:
            raise ValueError("mean prices must be positive")
        if min(self.price_rel_std, self.price_rel_std_lt, self.res_rel_std) < 0:
            raise ValueError("relative stds must be nonnegative")
        if self.res_rate < 0:
            raise ValueError("res_rate must be nonnegative")
        if not (math.isfinite(self.price_cap) and self.price_cap > self.mean_buy_rt):
            raise ValueError("price_cap must be finite and exceed mean_buy_rt")

    def price_bounds(self) -> tuple:
        """(max buying price, min selling price) the generator can emit.

        The folded normal is truncated at price_cap, and selling prices are
        positive multiples of buying prices that can get arbitrarily close
        to zero, so the floor is 0.
        """
        return self.price_cap, 0.0


@dataclass
class Trace:
    """A full materialized run of randomness at both timescales.

    slots[n*T + j] belongs to interval n; its res_arrivals hold the
    interval's harvest spread evenly over the interval (single-timescale
    view of the same randomness).
    """

    config: NetworkConfig
    params: ScenarioParams
    intervals: List[IntervalRandomness]
    slots: List[SlotRandomness]

    def __post_init__(self):
        T = self.config.interval_len
        if len(self.slots) != len(self.intervals) * T:
            raise ValueError(
                f"{len(self.slots)} slots inconsistent with "
                f"{len(self.intervals)} intervals of length {T}"
            )

    @property
    def num_slots(self) -> int:
        return len(self.slots)

    @property
    def num_intervals(self) -> int:
        return len(self.intervals)

    def interval_of_slot(self, t: int) -> int:
        return t // self.config.interval_len


def draw_folded_normal(rng: np.random.Generator, mean: float, rel_std: float,
                       cap: float = math.inf, size=None):
    """Draw min(|X|, cap) with X ~ Normal(mean, (rel_std*mean)^2).

    For rel_std well below ~0.4 the folded mean is within a fraction of a
    percent of `mean`, so no fold correction is applied.
    """
    if mean <= 0:
        raise ValueError("mean must be positive")
    if rel_std < 0:
        raise ValueError("rel_std must be nonnegative")
    if cap <= 0:
        raise ValueError("cap must be positive")
    x = np.abs(rng.normal(mean, rel_std * mean, size=size))
    x = np.minimum(x, cap)
    return float(x) if size is None else x


def draw_channels(rng: np.random.Generator, cfg: NetworkConfig) -> ChannelState:
    """Fresh i.i.d. CN(0, 1) channel matrix for one slot."""
    shape = (cfg.total_antennas, cfg.num_users)
    re = rng.normal(0.0, math.sqrt(0.5), size=shape)
    im = rng.normal(0.0, math.sqrt(0.5), size=shape)
    return ChannelState(re + 1j * im)


def generate_trace(cfg: NetworkConfig, params: ScenarioParams,
                   num_intervals: int) -> Trace:
    """Generate a deterministic trace of `num_intervals` coarse intervals.

    Draw order is fixed (per interval: ahead price, per-BS harvest, then
    per slot: real-time price, channels), so a given (cfg, params, N)
    always produces the same trace.
    """
    if num_intervals < 1:
        raise ValueError("num_intervals must be >= 1")
    rng = np.random.default_rng(params.seed)
    T = cfg.interval_len
    intervals: List[IntervalRandomness] = []
    slots: List[SlotRandomness] = []
    for _ in range(num_intervals):
        alpha_lt = draw_folded_normal(
            rng, params.mean_buy_lt, params.price_rel_std_lt, params.price_cap
        )
        res = draw_folded_normal(
            rng, T * params.res_rate, params.res_rel_std, size=cfg.num_bs
        ) if params.res_rate > 0 else np.zeros(cfg.num_bs)
        interval = IntervalRandomness(
            buy_price_lt=alpha_lt,
            sell_price_lt=params.sell_ratio_lt * alpha_lt,
            res_arrivals=res,
        )
        intervals.append(interval)
        for _ in range(T):
            alpha_rt = draw_folded_normal(
                rng, params.mean_buy_rt, params.price_rel_std, params.price_cap
            )
            slots.append(
                SlotRandomness(
                    buy_price=alpha_rt,
                    sell_price=params.sell_ratio_rt * alpha_rt,
                    channels=draw_channels(rng, cfg),
                    res_arrivals=interval.res_arrivals / T,
                )
            )
    return Trace(config=cfg, params=params, intervals=intervals, slots=slots)


def _config_to_dict(cfg: NetworkConfig) -> dict:
    d = asdict(cfg)
    d["sinr_targets"] = list(cfg.sinr_targets)
    d["noise_vars"] = list(cfg.noise_vars)
    return d


def trace_to_dict(trace: Trace) -> dict:
    return {
        "version": TRACE_FORMAT_VERSION,
        "layout": _LAYOUT_NOTE,
        "config": _config_to_dict(trace.config),
        "params": asdict(trace.params),
        "intervals": [
            {
                "alpha_lt": iv.buy_price_lt,
                "beta_lt": iv.sell_price_lt,
                "res": iv.res_arrivals.tolist(),
            }
            for iv in trace.intervals
        ],
        "slots": [
            {
                "alpha_rt": s.buy_price,
                "beta_rt": s.sell_price,
                "H_re": s.channels.matrix.real.T.tolist(),
                "H_im": s.channels.matrix.imag.T.tolist(),
            }
            for s in trace.slots
        ],
    }


def trace_from_dict(data: dict) -> Trace:
    try:
        version = data["version"]
        if version != TRACE_FORMAT_VERSION:
            raise TraceFormatError(
                f"unsupported trace version {version!r}, expected {TRACE_FORMAT_VERSION}"
            )
        cfg = NetworkConfig(**{
            k: (tuple(v) if isinstance(v, list) else v)
            for k, v in data["config"].items()
        })
        params = ScenarioParams(**data["params"])
        T = cfg.interval_len
        intervals = [
            IntervalRandomness(
                buy_price_lt=iv["alpha_lt"],
                sell_price_lt=iv["beta_lt"],
                res_arrivals=np.asarray(iv["res"], dtype=float),
            )
            for iv in data["intervals"]
        ]
        slots = []
        for t, s in enumerate(data["slots"]):
            re = np.asarray(s["H_re"], dtype=float).T
            im = np.asarray(s["H_im"], dtype=float).T
            slots.append(
                SlotRandomness(
                    buy_price=s["alpha_rt"],
                    sell_price=s["beta_rt"],
                    channels=ChannelState(re + 1j * im),
                    res_arrivals=intervals[t // T].res_arrivals / T,
                )
            )
        return Trace(config=cfg, params=params, intervals=intervals, slots=slots)
    except TraceFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceFormatError(f"malformed trace data: {exc}") from exc


def save_trace(trace: Trace, sink: Union[str, io.TextIOBase]) -> None:
    """Write a trace as JSON to a path or text file object."""
    payload = json.dumps(trace_to_dict(trace), indent=None, separators=(",", ":"))
    if isinstance(sink, (str, bytes, os.PathLike)):
        with open(sink, "w", encoding="utf-8") as fh:
            fh.write(payload)
    else:
        sink.write(payload)


def load_trace(source: Union[str, io.TextIOBase]) -> Trace:
    """Read a trace from a path or text file object; validates the format."""
    if isinstance(source, (str, bytes, os.PathLike)):
        with open(source, "r", encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = source.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise TraceFormatError("trace file must hold a JSON object")
    return trace_from_dict(data)
