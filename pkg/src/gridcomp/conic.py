"""Per-slot convex subproblem as a real second-order-cone program.

The per-slot decision (beamformers, battery charge) minimizes
``sum_i [V * max(alpha*u_i, beta*u_i) + Q_i * P_b_i]`` with
``u_i = P_c + P_x_i - a_i + P_b_i`` subject to per-user SINR cones,
per-BS charge bounds and consumption caps. Complex beamformers are
embedded as stacked (Re, Im) real blocks; the quadratic transmit power
enters through a rotated-cone epigraph so the program stays a pure SOCP
over (zero, nonnegative, second-order) cones in the canonical form

    minimize c'x   subject to   A x + s = b,   s in K.

`solve` hands the canonical data to an interior-point backend;
`oracle_solve` independently brute-forces tiny instances by sweeping the
Pareto frontier of per-BS transmit powers (via uplink-downlink duality
fixed-point iterations) against a charge grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

import clarabel

from .model import Beamformers, ChannelState, NetworkConfig

__all__ = [
    "ConicProgram",
    "ConicSolution",
    "ConeProgramBuilder",
    "embed_complex",
    "emit_slot_constraints",
    "build_slot_program",
    "solve",
    "oracle_solve",
    "extract_beamformers",
    "extract_charges",
    "dump_triplets",
    "weighted_min_power",
]

DEFAULT_TOL = 1e-8


@dataclass
class ConicProgram:
    """Canonical conic program: min c'x s.t. A x + s = b, s in K.

    K is ordered: `zero_dim` equality rows, then `nonneg_dim` inequality
    rows, then second-order cones of sizes `soc_dims`. `var_map` names
    slices of x (e.g. "w[0]" per-user real beamformer block, "pb"/"s"/"p"
    per-BS scalars); the slices must tile x exactly.
    """

    c: np.ndarray
    A: sparse.csc_matrix
    b: np.ndarray
    zero_dim: int
    nonneg_dim: int
    soc_dims: Tuple[int, ...]
    var_map: Dict[str, slice]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m, n = self.A.shape
        if self.c.shape != (n,):
            raise ValueError(f"c has shape {self.c.shape}, expected ({n},)")
        if self.b.shape != (m,):
            raise ValueError(f"b has shape {self.b.shape}, expected ({m},)")
        total = self.zero_dim + self.nonneg_dim + sum(self.soc_dims)
        if total != m:
            raise ValueError(f"cone dims sum to {total}, A has {m} rows")
        covered = sorted((s.start, s.stop) for s in self.var_map.values())
        pos = 0
        for start, stop in covered:
            if start != pos:
                raise ValueError("var_map must cover x exactly once")
            pos = stop
        if pos != n:
            raise ValueError("var_map must cover x exactly once")

    @property
    def num_vars(self) -> int:
        return self.A.shape[1]

    @property
    def num_rows(self) -> int:
        return self.A.shape[0]


@dataclass
class ConicSolution:
    """Primal solution of a ConicProgram with quality diagnostics."""

    x: np.ndarray
    objective: float
    status: str  # "optimal" | "infeasible" | "numerical-limit"
    residuals: Dict[str, float]
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


class ConeProgramBuilder:
    """Incremental assembly of the canonical form.

    Every row supplies the A coefficients and b entry of ``A x + s = b``,
    so the implied slack is ``s = b - a.x``: an inequality ``a.x <= rhs``
    is added verbatim, and a second-order cone block lists its head row
    (``s0 = b0 - a0.x`` must dominate) followed by the remaining rows.
    """

    def __init__(self, num_vars: int):
        self.num_vars = num_vars
        self._sections = {"zero": [], "nonneg": [], "soc": []}
        self.soc_dims: List[int] = []

    @staticmethod
    def _row(coeffs: Dict[int, float], rhs: float):
        return (coeffs, float(rhs))

    def add_equality(self, coeffs: Dict[int, float], rhs: float) -> None:
        self._sections["zero"].append(self._row(coeffs, rhs))

    def add_inequality(self, coeffs: Dict[int, float], rhs: float) -> None:
        """a.x <= rhs."""
        self._sections["nonneg"].append(self._row(coeffs, rhs))

    def add_soc(self, rows: Sequence[Tuple[Dict[int, float], float]]) -> None:
        if len(rows) < 2:
            raise ValueError("a second-order cone needs dimension >= 2")
        self._sections["soc"].extend(self._row(c, r) for c, r in rows)
        self.soc_dims.append(len(rows))

    def build(self, c: np.ndarray, var_map: Dict[str, slice],
              meta: Optional[dict] = None) -> ConicProgram:
        rows_i: List[int] = []
        cols_j: List[int] = []
        vals: List[float] = []
        b: List[float] = []
        r = 0
        for section in ("zero", "nonneg", "soc"):
            for coeffs, rhs in self._sections[section]:
                for j, v in coeffs.items():
                    if v != 0.0:
                        rows_i.append(r)
                        cols_j.append(j)
                        vals.append(float(v))
                b.append(rhs)
                r += 1
        A = sparse.csc_matrix(
            (vals, (rows_i, cols_j)), shape=(r, self.num_vars)
        )
        return ConicProgram(
            c=np.asarray(c, dtype=float),
            A=A,
            b=np.asarray(b, dtype=float),
            zero_dim=len(self._sections["zero"]),
            nonneg_dim=len(self._sections["nonneg"]),
            soc_dims=tuple(self.soc_dims),
            var_map=dict(var_map),
            meta=dict(meta or {}),
        )


def embed_complex(h: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Real rows computing (Re, Im) of h^H w from a stacked (Re w, Im w).

    Returns (re_row, im_row), each of length 2*len(h), such that for the
    stacked real vector v = [Re w; Im w]:
        re_row @ v = Re(h^H w)   and   im_row @ v = Im(h^H w).
    """
    h = np.asarray(h, dtype=complex).ravel()
    hr, hi = h.real, h.imag
    re_row = np.concatenate([hr, hi])
    im_row = np.concatenate([-hi, hr])
    return re_row, im_row


def _block_coeffs(offset: int, row: np.ndarray, scale: float = 1.0) -> Dict[int, float]:
    return {offset + j: scale * v for j, v in enumerate(row) if v != 0.0}


def emit_slot_constraints(
    bld: ConeProgramBuilder,
    cfg: NetworkConfig,
    channels: ChannelState,
    w_starts: Sequence[int],
    pb_start: int,
    s_start: int,
    p_start: int,
    buy: float,
    sell: float,
    penalty_weight: float,
    supply,
    pb_bounds: Tuple[float, float],
    supply_vars: Optional[Tuple[Sequence[int], float]] = None,
) -> None:
    """Emit one slot's constraint rows at the given variable offsets.

    Used both by the per-slot program and by the full-horizon clairvoyant
    program (which chains many such blocks). `supply` is a per-BS constant
    delivered this slot; `supply_vars`, when given, is (per-BS variable
    indices, coefficient) adding coeff * x[idx] to each BS's supply (the
    planned-energy coupling of the full-horizon program).
    """
    if not (buy >= sell >= 0.0):
        raise ValueError(f"need buy >= sell >= 0, got {buy}, {sell}")
    if penalty_weight < 0:
        raise ValueError("penalty weight must be nonnegative")
    I, M, K = cfg.num_bs, cfg.num_antennas, cfg.num_users
    MI = cfg.total_antennas
    H = channels.matrix
    if H.shape != (MI, K):
        raise ValueError(f"channel shape {H.shape} does not match config")
    a = np.broadcast_to(np.asarray(supply, dtype=float), (I,))
    pb_lo, pb_hi = pb_bounds
    if pb_lo > pb_hi:
        raise ValueError("pb bounds out of order")
    gamma = cfg.gamma()
    noise = cfg.noise()
    V = float(penalty_weight)

    # zero cone: rotate each user's own channel product onto the real axis
    re_rows = []
    im_rows = []
    for k in range(K):
        re_r, im_r = embed_complex(H[:, k])
        re_rows.append(re_r)
        im_rows.append(im_r)
        bld.add_equality(_block_coeffs(w_starts[k], im_r), 0.0)

    # nonneg cone: charge box and the two transaction-cost epigraph branches
    for i in range(I):
        bld.add_inequality({pb_start + i: 1.0}, pb_hi)
        bld.add_inequality({pb_start + i: -1.0}, -pb_lo)
    for price in (buy, sell):
        for i in range(I):
            coeff = V * price
            row = {p_start + i: coeff, pb_start + i: coeff, s_start + i: -1.0}
            if supply_vars is not None:
                idxs, sc = supply_vars
                row[idxs[i]] = row.get(idxs[i], 0.0) - coeff * sc
            bld.add_inequality(row, coeff * (a[i] - cfg.circuit_power))

    # SOC per user: ||(cross-user products, noise)|| <= own product / sqrt(gamma)
    for k in range(K):
        rows = [(_block_coeffs(w_starts[k], re_rows[k],
                               -1.0 / math.sqrt(gamma[k])), 0.0)]
        for l in range(K):
            if l == k:
                continue
            rows.append((_block_coeffs(w_starts[l], re_rows[k], -1.0), 0.0))
            rows.append((_block_coeffs(w_starts[l], im_rows[k], -1.0), 0.0))
        rows.append(({}, math.sqrt(noise[k])))
        bld.add_soc(rows)

    # SOC per BS: consumption cap on the stacked real coordinates
    # (vacuous without users: P_x is identically zero then)
    if math.isfinite(cfg.max_consumption) and K > 0:
        cap = cfg.max_consumption - cfg.circuit_power
        for i in range(I):
            rows = [({}, math.sqrt(cap))]
            for k in range(K):
                for part in (0, MI):  # Re block, then Im block
                    base = w_starts[k] + part + i * M
                    rows.extend(({base + j: -1.0}, 0.0) for j in range(M))
            bld.add_soc(rows)

    # rotated-cone epigraph p_i >= sum_k |w_k block i|^2:
    # ||(2 W_i, p_i - 1)|| <= p_i + 1
    for i in range(I):
        rows = [({p_start + i: -1.0}, 1.0)]
        for k in range(K):
            for part in (0, MI):
                base = w_starts[k] + part + i * M
                rows.extend(({base + j: -2.0}, 0.0) for j in range(M))
        rows.append(({p_start + i: -1.0}, -1.0))
        bld.add_soc(rows)


def build_slot_program(
    cfg: NetworkConfig,
    channels: ChannelState,
    buy: float,
    sell: float,
    supply,
    penalty_weight: float,
    queues,
    pb_bounds: Optional[Tuple[float, float]] = None,
) -> ConicProgram:
    """Assemble one slot's decision problem in canonical conic form.

    `supply` is the per-slot energy the grid/harvest already delivers to
    each BS (the harvested amount in single-timescale mode, the planned
    amount per slot in planning mode). `pb_bounds` overrides the config's
    charge box (the no-storage baseline collapses it to (0, 0)).
    """
    I, M, K = cfg.num_bs, cfg.num_antennas, cfg.num_users
    MI = cfg.total_antennas
    Q = np.broadcast_to(np.asarray(queues, dtype=float), (I,))
    bounds = pb_bounds if pb_bounds is not None else (cfg.charge_min, cfg.charge_max)

    wlen = 2 * MI
    var_map: Dict[str, slice] = {}
    off = 0
    for k in range(K):
        var_map[f"w[{k}]"] = slice(off, off + wlen)
        off += wlen
    var_map["pb"] = slice(off, off + I); off += I
    var_map["s"] = slice(off, off + I); off += I
    var_map["p"] = slice(off, off + I); off += I
    n = off

    bld = ConeProgramBuilder(n)
    emit_slot_constraints(
        bld, cfg, channels,
        w_starts=[var_map[f"w[{k}]"].start for k in range(K)],
        pb_start=var_map["pb"].start,
        s_start=var_map["s"].start,
        p_start=var_map["p"].start,
        buy=buy, sell=sell,
        penalty_weight=penalty_weight,
        supply=supply,
        pb_bounds=bounds,
    )

    c = np.zeros(n)
    c[var_map["s"]] = 1.0
    c[var_map["pb"]] = Q
    meta = {
        "num_bs": I,
        "num_antennas": M,
        "num_users": K,
        "buy": buy,
        "sell": sell,
        "supply": np.array(np.broadcast_to(np.asarray(supply, dtype=float), (I,))),
        "penalty_weight": float(penalty_weight),
        "queues": np.array(Q),
    }
    return bld.build(c, var_map, meta)


_STATUS_OPTIMAL = {clarabel.SolverStatus.Solved}
_STATUS_INFEASIBLE = {
    clarabel.SolverStatus.PrimalInfeasible,
    clarabel.SolverStatus.AlmostPrimalInfeasible,
}


def _clarabel_once(program: ConicProgram, inner_tol: float):
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_threads = 1
    settings.tol_gap_abs = inner_tol
    settings.tol_gap_rel = inner_tol
    settings.tol_feas = inner_tol
    cones = []
    if program.zero_dim:
        cones.append(clarabel.ZeroConeT(program.zero_dim))
    if program.nonneg_dim:
        cones.append(clarabel.NonnegativeConeT(program.nonneg_dim))
    cones.extend(clarabel.SecondOrderConeT(d) for d in program.soc_dims)
    P = sparse.csc_matrix((program.num_vars, program.num_vars))
    solver = clarabel.DefaultSolver(P, program.c, program.A, program.b, cones, settings)
    return solver.solve()


def _residuals(program: ConicProgram, raw) -> Tuple[np.ndarray, Dict[str, float], float]:
    x = np.asarray(raw.x, dtype=float)
    z = np.asarray(raw.z, dtype=float)
    s = np.asarray(raw.s, dtype=float)
    obj = float(program.c @ x)
    dual_obj = float(raw.obj_val_dual)
    r_prim = float(
        np.max(np.abs(program.A @ x + s - program.b), initial=0.0)
        / max(1.0, float(np.max(np.abs(program.b), initial=0.0)))
    )
    r_dual = float(
        np.max(np.abs(program.A.T @ z + program.c), initial=0.0)
        / max(1.0, float(np.max(np.abs(program.c), initial=0.0)))
    )
    gap = abs(obj - dual_obj) / max(1.0, abs(obj), abs(dual_obj))
    return x, {"primal": r_prim, "dual": r_dual, "gap": gap}, obj


def solve(program: ConicProgram, tol: float = DEFAULT_TOL) -> ConicSolution:
    """Solve a canonical conic program to the given tolerance.

    Residuals (relative primal/dual infeasibility and duality gap) are
    recomputed from the returned iterates in the original problem space;
    "optimal" is only reported when they all pass `tol`. The backend stops
    on its own internally-scaled measures, so a fixed ladder of tighter
    requests is tried until the recomputed residuals pass. Deterministic
    for fixed inputs.
    """
    best = None  # (max residual, ConicSolution)
    for inner in (tol / 10.0, tol / 200.0):
        raw = _clarabel_once(program, max(inner, 1e-12))
        status = raw.status
        if status in _STATUS_INFEASIBLE:
            return ConicSolution(
                x=np.full(program.num_vars, np.nan),
                objective=math.nan,
                status="infeasible",
                residuals={"primal": math.inf, "dual": math.inf, "gap": math.inf},
                info={"solver_status": str(status), "iterations": raw.iterations},
            )
        x, residuals, obj = _residuals(program, raw)
        converged = (status in _STATUS_OPTIMAL
                     or status == clarabel.SolverStatus.AlmostSolved)
        good = converged and all(v <= tol for v in residuals.values())
        sol = ConicSolution(
            x=x,
            objective=obj,
            status="optimal" if good else "numerical-limit",
            residuals=residuals,
            info={
                "solver_status": str(status),
                "iterations": raw.iterations,
                "solve_time": raw.solve_time,
            },
        )
        if good:
            return sol
        worst = max(residuals.values()) if converged else math.inf
        if best is None or worst < best[0]:
            best = (worst, sol)
    return best[1]


def extract_beamformers(program: ConicProgram, x: np.ndarray) -> Beamformers:
    """Reassemble the complex beamformer matrix from a primal point."""
    K = program.meta["num_users"]
    cols = []
    for k in range(K):
        block = x[program.var_map[f"w[{k}]"]]
        mi = block.size // 2
        cols.append(block[:mi] + 1j * block[mi:])
    if not cols:
        mi = program.meta["num_bs"] * program.meta["num_antennas"]
        return Beamformers(np.zeros((mi, 0), dtype=complex))
    return Beamformers(np.stack(cols, axis=1))


def extract_charges(program: ConicProgram, x: np.ndarray) -> np.ndarray:
    return np.array(x[program.var_map["pb"]], dtype=float)


def dump_triplets(program: ConicProgram, sink) -> None:
    """Write the program in a plain sparse-triplet text format.

    Lines: comments (#), then `c <i> <value>` objective entries,
    `A <row> <col> <value>` matrix entries, and `b <row> <value>`
    right-hand-side entries, all zero-based. Cone layout is in the header.
    """
    own = isinstance(sink, (str, bytes))
    fh = open(sink, "w", encoding="utf-8") if own else sink
    try:
        fh.write("# canonical conic program: min c'x  s.t.  A x + s = b, s in K\n")
        fh.write(f"# vars {program.num_vars} rows {program.num_rows}\n")
        fh.write(
            "# cones zero %d nonneg %d soc %s\n"
            % (program.zero_dim, program.nonneg_dim,
               " ".join(str(d) for d in program.soc_dims))
        )
        for i, v in enumerate(program.c):
            if v != 0.0:
                fh.write(f"c {i} {v!r}\n")
        coo = program.A.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"A {i} {j} {v!r}\n")
        for i, v in enumerate(program.b):
            if v != 0.0:
                fh.write(f"b {i} {v!r}\n")
    finally:
        if own:
            fh.close()


# --- independent brute-force oracle ---------------------------------------


def weighted_min_power(
    H: np.ndarray,
    gamma: np.ndarray,
    noise: np.ndarray,
    bs_weights: np.ndarray,
    num_antennas: int,
    tol: float = 1e-13,
    max_iter: int = 20000,
):
    """Minimize sum_i weights_i * P_x_i subject to all SINR targets.

    Classic uplink-downlink duality: iterate the fixed point for the dual
    uplink powers, recover beamformer directions from the regularized
    channel covariance, then scale powers so every SINR constraint holds
    with equality. Returns (per_bs_power, W) or None when the targets are
    infeasible. Independent of the conic solver by construction.
    """
    H = np.asarray(H, dtype=complex)
    MI, K = H.shape
    if K == 0:
        return np.zeros(len(bs_weights)), np.zeros((MI, 0), dtype=complex)
    gamma = np.asarray(gamma, dtype=float)
    noise = np.asarray(noise, dtype=float)
    d = np.repeat(np.asarray(bs_weights, dtype=float), num_antennas)
    if np.any(d <= 0):
        raise ValueError("BS weights must be positive")
    D = np.diag(d).astype(complex)
    lam = np.ones(K)
    scale = 1.0 + 1.0 / gamma
    converged = False
    for _ in range(max_iter):
        M = D + (H * lam) @ H.conj().T
        X = np.linalg.solve(M, H)
        q = np.real(np.sum(H.conj() * X, axis=0))
        if np.any(q <= 0):
            return None
        new = 1.0 / (scale * q)
        if not np.all(np.isfinite(new)) or np.max(new) > 1e13:
            return None
        step = np.max(np.abs(new - lam) / np.maximum(np.abs(new), 1e-300))
        lam = new
        if step < tol:
            converged = True
            break
    if not converged:
        return None
    M = D + (H * lam) @ H.conj().T
    U = np.linalg.solve(M, H)
    norms = np.linalg.norm(U, axis=0)
    if np.any(norms <= 0):
        return None
    U = U / norms
    G = np.abs(H.conj().T @ U) ** 2  # G[k, l] = |h_k^H u_l|^2
    F = -G
    np.fill_diagonal(F, np.diag(G) / gamma)
    try:
        p = np.linalg.solve(F, noise)
    except np.linalg.LinAlgError:
        return None
    if np.any(p <= 0):
        return None
    W = U * np.sqrt(p)
    I = len(bs_weights)
    per_bs = np.array([
        float(np.sum(np.abs(W[i * num_antennas:(i + 1) * num_antennas, :]) ** 2))
        for i in range(I)
    ])
    return per_bs, W


def _per_bs_best_charge(
    px: float, a_i: float, q_i: float, buy: float, sell: float, V: float,
    pb_lo: float, pb_hi: float, pb_grid: np.ndarray,
) -> float:
    """Exact 1-D minimum of V*G(P_c-free net draw) + Q*pb over candidates.

    The slot objective is piecewise linear in pb with a single kink where
    the net draw crosses zero, so the grid plus that kink plus the box
    edges contains a minimizer.
    """
    base = px - a_i  # net draw before circuit power; caller folds P_c into a_i
    cands = [pb_grid, np.array([pb_lo, pb_hi])]
    kink = -base
    if pb_lo <= kink <= pb_hi:
        cands.append(np.array([kink]))
    pb = np.concatenate(cands)
    vals = V * np.maximum(buy * (base + pb), sell * (base + pb)) + q_i * pb
    return float(np.min(vals))


def oracle_solve(
    cfg: NetworkConfig,
    channels: ChannelState,
    buy: float,
    sell: float,
    supply,
    penalty_weight: float,
    queues,
    grid_density: int = 48,
    refine_passes: int = 2,
) -> float:
    """Brute-force reference optimum for tiny instances (I,M,K <= 2).

    Sweeps beamformers parameterized by the per-BS weight ratio of a
    weighted power minimization (every sweep point is exactly feasible),
    refines the ratio grid around the best point, and minimizes the charge
    separately per BS on a grid plus the cost kink. The returned value is
    an upper bound on the true optimum that tightens as grid_density and
    refine_passes grow; math.inf signals infeasibility.
    """
    I, M, K = cfg.num_bs, cfg.num_antennas, cfg.num_users
    if I > 2 or M > 2 or K > 2:
        raise ValueError("oracle_solve is guarded to I <= 2, M <= 2, K <= 2")
    if grid_density < 2:
        raise ValueError("grid_density must be >= 2")
    H = channels.matrix
    a = np.broadcast_to(np.asarray(supply, dtype=float), (I,))
    Q = np.broadcast_to(np.asarray(queues, dtype=float), (I,))
    V = float(penalty_weight)
    gamma, noise = cfg.gamma(), cfg.noise()
    pb_lo, pb_hi = cfg.charge_min, cfg.charge_max
    pb_grid = np.linspace(pb_lo, pb_hi, grid_density)
    px_cap = cfg.max_consumption - cfg.circuit_power
    a_eff = a - cfg.circuit_power  # fold P_c into the supply offset

    def evaluate(per_bs_power: np.ndarray) -> float:
        if np.any(per_bs_power > px_cap + 1e-12):
            return math.inf
        return sum(
            _per_bs_best_charge(
                per_bs_power[i], a_eff[i], Q[i], buy, sell, V, pb_lo, pb_hi, pb_grid
            )
            for i in range(I)
        )

    def frontier_point(weights: np.ndarray):
        res = weighted_min_power(H, gamma, noise, weights, M)
        return None if res is None else res[0]

    if K == 0:
        return evaluate(np.zeros(I))

    if I == 1:
        pt = frontier_point(np.ones(1))
        return math.inf if pt is None else evaluate(pt)

    # I == 2: sweep the weight ratio, then zoom in around the best ratio
    lo_ratio = max(sell, 1e-6 * max(buy, 1.0)) / max(buy, 1e-12) / 4.0
    hi_ratio = 4.0 * max(buy, 1e-12) / max(sell, 1e-6 * max(buy, 1.0))
    best_val = math.inf
    best_r = 1.0
    grid = np.geomspace(lo_ratio, hi_ratio, grid_density)
    grid = np.unique(np.concatenate([grid, [1.0]]))
    for _ in range(refine_passes + 1):
        for r in grid:
            pt = frontier_point(np.array([r, 1.0]))
            if pt is None:
                continue
            val = evaluate(pt)
            if val < best_val:
                best_val, best_r = val, r
        if math.isinf(best_val):
            break
        spacing = grid[1] / grid[0] if len(grid) > 1 else 2.0
        grid = np.geomspace(best_r / spacing, best_r * spacing, grid_density)
    return best_val
