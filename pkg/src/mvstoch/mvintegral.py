"""The measure-valued stochastic integral and its interchange checks.

The integral of a measure-valued integrand against a d-dimensional driver
accumulates, per scenario, one signed measure per time index:

    charge_l = sum_{j < l} sum_i (component-i measure at slot j) * dS^i_{j+1},

which for elementary integrands coincides with the rectangle-sum formula
exactly.  The result is one-dimensional in the measure slot (components of
the integrand pair off against driver components), null at time zero and
adapted.

In discrete time both sides of the stochastic Fubini identity -- pairing
the integral measure with a test function versus integrating the paired
integrand -- are the same finite double sum in different orders, so the
checks here assert near machine-precision agreement on every run, for
continuous test functions and for indicators of atom-resolvable sets
alike.

Seminorm machinery: the maximal seminorm aggregates, over the test
family, the running-sup L2 norms of the paired integral paths; for
elementary integrands it is dominated by the integrand seminorm whenever
the driver's control inequality holds (exactly on scenario trees with
late enough horizons, within Monte Carlo error otherwise).

Charge ensembles are stored dense, (P, N + 1, J + 1); above a configurable
entry cap the array is placed in a temporary on-disk memmap and filled in
scenario blocks.  Per-scenario integration is independent (the block loop
could be parallelized); ensembles are immutable after the build and every
reduction is a deterministic ordered sum.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .drivers import DriverPath, StoppingRule, ito_integral, stopping_weights
from .grid import CompactGrid, TestFamily
from .integrands import MeasureProcess, evaluate, integrand_seminorm, integrability_check, _family_evals

__all__ = [
    "ChargePath",
    "mv_integral",
    "evaluate_charge",
    "maximal_seminorm",
    "fubini_check_regular",
    "fubini_check_general",
    "seminorm_domination_check",
    "convergence_transfer_check",
    "standard_cell_sets",
    "MEMORY_CAP_ENTRIES",
]

# dense charge storage above this many float64 entries goes to a temp memmap
MEMORY_CAP_ENTRIES = 1 << 27


@dataclass
class ChargePath:
    """Per-scenario, per-time-index signed measure ensemble."""

    grid: CompactGrid
    weights: np.ndarray  # (P, N + 1, J + 1)
    stopped_at: StoppingRule | None = None

    def __post_init__(self):
        if self.weights.ndim != 3 or self.weights.shape[2] != self.grid.n_atoms:
            raise ValueError("charge weights must be (P, N + 1, J + 1)")

    @property
    def n_scenarios(self) -> int:
        return self.weights.shape[0]

    @property
    def n_indices(self) -> int:
        return self.weights.shape[1]

    def evaluate(self, g: np.ndarray) -> np.ndarray:
        return evaluate_charge(self, g)

    def __sub__(self, other: "ChargePath") -> "ChargePath":
        return ChargePath(self.grid, np.asarray(self.weights) - np.asarray(other.weights))

    def __add__(self, other: "ChargePath") -> "ChargePath":
        return ChargePath(self.grid, np.asarray(self.weights) + np.asarray(other.weights))

    def __mul__(self, scalar: float) -> "ChargePath":
        return ChargePath(self.grid, np.asarray(self.weights) * float(scalar))

    __rmul__ = __mul__


def _charge_buffer(shape: tuple[int, ...], cap: int) -> np.ndarray:
    entries = math.prod(shape)
    if entries <= cap:
        return np.zeros(shape)
    tmp = tempfile.NamedTemporaryFile(prefix="mvstoch_charge_", suffix=".dat", delete=False)
    tmp.close()
    buf = np.memmap(tmp.name, dtype=np.float64, mode="w+", shape=shape)
    buf[:] = 0.0
    os.unlink(tmp.name)  # space is reclaimed once the mapping is released
    return buf


def mv_integral(phi: MeasureProcess, S: DriverPath, upto: StoppingRule | None = None,
                memory_cap: int = MEMORY_CAP_ENTRIES) -> ChargePath:
    """Accumulate the measure-valued integral of phi against the driver."""
    if phi.n_steps != S.timegrid.n_steps:
        raise ValueError("time grid mismatch")
    if phi.d != S.spec.d:
        raise ValueError("component count mismatch")
    P, N = S.scenarios.n_scenarios, S.timegrid.n_steps
    dS = S.increments
    if upto is not None:
        dS = dS * upto.increment_mask()[:, :, None]
    out = _charge_buffer((P, N + 1, phi.grid.n_atoms), memory_cap)
    block = max(1, memory_cap // max(1, (N + 1) * phi.grid.n_atoms))
    for lo in range(0, P, block):
        hi = min(lo + block, P)
        if phi.weights.shape[0] == 1:
            inc = np.einsum("nij,pni->pnj", phi.weights[0], dS[lo:hi])
        else:
            inc = np.einsum("pnij,pni->pnj", phi.weights[lo:hi], dS[lo:hi])
        np.cumsum(inc, axis=1, out=out[lo:hi, 1:])
    if not np.all(np.isfinite(out)):
        raise OverflowError("measure-valued integral overflowed")
    return ChargePath(phi.grid, out, stopped_at=upto)


def evaluate_charge(charge: ChargePath, g: np.ndarray) -> np.ndarray:
    """Pair every (scenario, time index) measure with the grid function g."""
    g = np.asarray(g, dtype=float)
    if g.shape != (charge.grid.n_atoms,):
        raise ValueError("test function does not match the grid")
    return np.asarray(charge.weights) @ g


def maximal_seminorm(charge: ChargePath, fam: TestFamily, probs: np.ndarray) -> float:
    """Aggregate running-sup L2 seminorm of the charge over the family."""
    Z = np.einsum("plj,kj->pkl", np.asarray(charge.weights), fam.functions)
    M = np.max(np.abs(Z), axis=2)  # (P, K)
    per_k = probs @ (M * M)
    return float(np.sqrt(fam.gammas @ per_k))


def _discrepancy_rows(lhs_stack: np.ndarray, rhs_stack: np.ndarray, labels: Sequence) -> dict:
    """Max pathwise gaps per test function; lhs/rhs stacked (n_f, P, N + 1)."""
    rows = []
    for label, lhs, rhs in zip(labels, lhs_stack, rhs_stack):
        gap = np.abs(lhs - rhs)
        p, ell = np.unravel_index(np.argmax(gap), gap.shape)
        rows.append({"test": label, "max_discrepancy": float(gap[p, ell]),
                     "scenario": int(p), "time_index": int(ell)})
    worst = max(rows, key=lambda r: r["max_discrepancy"])
    return {
        "max_abs_discrepancy": worst["max_discrepancy"],
        "mean_discrepancy": float(np.mean([r["max_discrepancy"] for r in rows])),
        "per_f": rows,
    }


def _paired_ito_paths(phi: MeasureProcess, S: DriverPath, functions: np.ndarray,
                      upto: StoppingRule | None) -> np.ndarray:
    """ito integrals of phi(f) for each row f of ``functions``; (n_f, P, N + 1)."""
    evals = np.einsum("pnij,kj->pnki", phi.weights, functions)
    dS = S.increments
    if upto is not None:
        dS = dS * upto.increment_mask()[:, :, None]
    contrib = np.einsum("pnki,pni->pnk", np.broadcast_to(evals, dS.shape[:2] + evals.shape[2:]), dS)
    P, N, K = contrib.shape
    out = np.zeros((K, P, N + 1))
    out[:, :, 1:] = np.cumsum(contrib, axis=1).transpose(2, 0, 1)
    return out


def fubini_check_regular(phi: MeasureProcess, S: DriverPath, fam: TestFamily,
                         upto: StoppingRule | None = None) -> dict:
    """Compare pairing-the-integral with integrating-the-pairing per family member."""
    if not integrability_check(phi, S.control, S.timegrid)["member"]:
        raise ValueError("integrand fails the finiteness check")
    charge = mv_integral(phi, S, upto=upto)
    lhs = np.einsum("plj,kj->kpl", np.asarray(charge.weights), fam.functions)
    rhs = _paired_ito_paths(phi, S, fam.functions, upto)
    return _discrepancy_rows(lhs, rhs, [f"u_{k+1}" for k in range(fam.size)])


def standard_cell_sets(grid: CompactGrid) -> list[tuple[str, int, int]]:
    """Default indicator sets: empty handled separately; full space,
    singleton atoms at both ends and the midpoint, and a left half."""
    J = grid.n_cells
    return [
        ("K", 0, J),
        ("atom_0", 0, 0),
        ("atom_mid", J // 2, J // 2),
        ("atom_last", J, J),
        ("left_half", 0, J // 2),
    ]


def fubini_check_general(phi: MeasureProcess, S: DriverPath,
                         sets: Sequence[tuple[str, int, int]] | None = None,
                         upto: StoppingRule | None = None) -> dict:
    """Same comparison with indicator test functions of atom-index ranges."""
    if sets is None:
        sets = standard_cell_sets(phi.grid)
    functions = np.stack([phi.grid.indicator(lo, hi) for _, lo, hi in sets])
    charge = mv_integral(phi, S, upto=upto)
    lhs = np.einsum("plj,kj->kpl", np.asarray(charge.weights), functions)
    rhs = _paired_ito_paths(phi, S, functions, upto)
    return _discrepancy_rows(lhs, rhs, [name for name, _, _ in sets])


def seminorm_domination_check(phi: MeasureProcess, S: DriverPath, V: np.ndarray,
                              tau: StoppingRule, fam: TestFamily) -> dict:
    """Check that the maximal seminorm of the stopped integral is dominated
    by the integrand seminorm (exact on trees, 3 standard errors otherwise)."""
    if phi.kind != "elementary":
        raise ValueError("domination check is stated for elementary integrands")
    scenarios = S.scenarios
    probs = scenarios.probs
    charge = mv_integral(phi, S, upto=tau)
    Z = np.einsum("plj,kj->pkl", np.asarray(charge.weights), fam.functions)
    M2 = np.max(np.abs(Z), axis=2) ** 2  # (P, K)
    r_sq_p = M2 @ fam.gammas
    r_value = float(np.sqrt(probs @ r_sq_p))

    w = stopping_weights(tau, V, scenarios)
    evals = _family_evals(phi, fam)
    sq = np.sum(evals * evals, axis=3)  # (P, N, K)
    q_sq_p = np.einsum("pn,pnk,k->p", w / probs[:, None],
                       np.broadcast_to(sq, w.shape + sq.shape[2:]), fam.gammas)
    q_value = float(np.sqrt(probs @ q_sq_p))

    if scenarios.is_tree:
        se = 0.0
        holds = r_value <= q_value + 1e-12
    else:
        P = scenarios.n_scenarios
        se_r_sq = float(np.std(r_sq_p) / math.sqrt(P))
        se_q_sq = float(np.std(q_sq_p) / math.sqrt(P))
        se_r = se_r_sq / (2 * r_value) if r_value > 0 else 0.0
        se_q = se_q_sq / (2 * q_value) if q_value > 0 else 0.0
        se = se_r + se_q
        holds = r_value <= q_value + 3 * se
    return {"r_value": r_value, "q_value": q_value, "holds": bool(holds), "se": se}


def convergence_transfer_check(phi: MeasureProcess, processes: Sequence[MeasureProcess],
                               S: DriverPath, tau: StoppingRule, V: np.ndarray,
                               fam: TestFamily) -> list[dict]:
    """Transfer of integrand convergence to the integral processes.

    For each approximant reports the integrand-seminorm gap to phi, the
    maximal-seminorm gap between the stopped integrals, and the uniform
    family bound of the approximant's integral.
    """
    scenarios = S.scenarios
    probs = scenarios.probs
    target = mv_integral(phi, S, upto=tau)
    sup = np.max(np.abs(fam.functions), axis=1)
    rows = []
    for n, phi_n in enumerate(processes, start=1):
        q_gap = integrand_seminorm(phi_n, fam, tau, V, scenarios, minus=phi)
        charge_n = mv_integral(phi_n, S, upto=tau)
        r_gap = maximal_seminorm(charge_n - target, fam, probs)
        Z = np.einsum("plj,kj->pkl", np.asarray(charge_n.weights), fam.functions)
        norms = np.sqrt(probs @ (np.max(np.abs(Z), axis=2) ** 2))
        ratios = np.divide(norms, sup, out=np.zeros_like(norms), where=sup > 0)
        rows.append({"n": n, "q_gap": q_gap, "r_gap": r_gap,
                     "uniform_bound": float(np.max(ratios))})
    return rows
