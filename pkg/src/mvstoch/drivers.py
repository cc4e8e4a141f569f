"""Scenario models, driver simulation and the scalar stochastic integral.

Discrete-time conventions used throughout the package:

  * Paths live on the uniform grid t_l = l * T / N, stored as arrays of
    shape (P, N + 1) or (P, N + 1, d) indexed by the grid index l.
  * Predictable (interval) values are stored with shape (P, N, d); slot j
    carries the value on (t_j, t_{j+1}] and must be known at t_j.  In tree
    mode that means: constant on the level-j filtration atoms.
  * A stopping rule holds one grid index per scenario, with N + 1 acting
    as the "never stops" marker.  "Strictly before tau" keeps exactly the
    increments whose right endpoint index is <= tau - 1, and the left
    limit of a path at tau is its value at index tau - 1 (index N for the
    never marker).  No interpolation anywhere.

Two scenario models are supported.  Monte Carlo ensembles draw scenario
blocks from generators seeded by a fixed function of the master seed, so
ensembles are reproducible and could be generated concurrently per block;
all reductions are deterministic ordered sums.  Scenario trees carry an
explicit per-level partition into filtration atoms (scenario indices are
arranged so atoms are contiguous blocks), probabilities are explicit, and
expectations are exact weighted sums.

Control processes: a driver's control path V is a nonnegative increasing
process against which squared stochastic integrals are bounded before any
stopping time.  Closed forms per driver (validated empirically by
``control_inequality_check``, which the test suite runs at scale):

  * brownian            V_t = vol^2 * t
  * fv_drift            V_t = |a| * t + 1e-9 * t   (kept strictly increasing)
  * compound_poisson    V_t = 4 * (t + rate * E[J^2] * t)
  * mixture             V_t = 4 * (vol^2 * t + |a| * t + rate * E[J^2] * t)

The jump formulas are a validated guess: no closed form is standard for
jump drivers, and the constant 4 absorbs the maximal-inequality factor.
Note that for a Brownian driver with V_t = t the control inequality is a
genuine theorem only once V_{tau-} >= E[sup |W|^2 over a unit of integral
time] (about 1.8), so experiment configs use horizons T >= 4 where the
Doob bound makes the margin certain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "TimeGrid",
    "ScenarioSet",
    "DriverSpec",
    "DriverPath",
    "PredictablePath",
    "StoppingRule",
    "simulate_driver",
    "control_process",
    "ito_integral",
    "energy_integral",
    "stopping_weights",
    "localizing_sequence",
    "control_inequality_check",
]

SCENARIO_CHUNK = 4096  # fixed: scenario i always lands in chunk i // SCENARIO_CHUNK
C_MIX = 4.0
EPS_FV = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.horizon <= 0 or self.n_steps < 1:
            raise ValueError("need positive horizon and at least one step")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps


class ScenarioSet:
    """Probability model: Monte Carlo ensemble or a finite scenario tree.

    Tree scenarios are indexed so that the level-l atom of scenario p is
    the contiguous block p // b**(depth - l); the per-level partition
    therefore refines automatically and is exposed via :meth:`atoms`.
    """

    def __init__(self, mode, n_scenarios, probs, seed=None, branching=None, depth=None):
        self.mode = mode
        self.n_scenarios = int(n_scenarios)
        self.probs = np.asarray(probs, dtype=float)
        self.seed = seed
        self.branching = branching
        self.depth = depth
        if self.probs.shape != (self.n_scenarios,):
            raise ValueError("need one probability per scenario")
        if np.any(self.probs <= 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be positive and sum to 1")
        self.probs.setflags(write=False)

    @classmethod
    def monte_carlo(cls, n_scenarios: int, seed: int) -> "ScenarioSet":
        if n_scenarios < 1:
            raise ValueError("need at least one scenario")
        probs = np.full(n_scenarios, 1.0 / n_scenarios)
        probs[-1] = 1.0 - probs[:-1].sum()
        return cls("monte_carlo", n_scenarios, probs, seed=int(seed))

    @classmethod
    def tree(cls, branching: int, depth: int, level_probs: Sequence[float] | None = None) -> "ScenarioSet":
        if branching < 2 or depth < 1:
            raise ValueError("need branching >= 2 and depth >= 1")
        p_branch = np.full(branching, 1.0 / branching) if level_probs is None else np.asarray(level_probs, float)
        if p_branch.shape != (branching,) or np.any(p_branch <= 0) or abs(p_branch.sum() - 1.0) > 1e-12:
            raise ValueError("branch probabilities must be positive and sum to 1")
        n = branching**depth
        digits = cls._digit_table(branching, depth)
        probs = np.prod(p_branch[digits], axis=1)
        probs = probs / probs.sum()
        obj = cls("tree", n, probs, branching=branching, depth=depth)
        obj._digits = digits
        return obj

    @staticmethod
    def _digit_table(b: int, depth: int) -> np.ndarray:
        """digits[p, k] = branch taken at step k + 1 (most significant first)."""
        p = np.arange(b**depth)
        cols = [(p // b ** (depth - 1 - k)) % b for k in range(depth)]
        return np.stack(cols, axis=1)

    @property
    def is_tree(self) -> bool:
        return self.mode == "tree"

    def digits(self) -> np.ndarray:
        if not self.is_tree:
            raise ValueError("digits only exist in tree mode")
        return self._digits

    def atom_ids(self, level: int) -> np.ndarray:
        """Id of the filtration atom containing each scenario at time t_level."""
        if not self.is_tree:
            raise ValueError("filtration atoms only exist in tree mode")
        if not (0 <= level <= self.depth):
            raise ValueError("level out of range")
        block = self.branching ** (self.depth - level)
        return np.arange(self.n_scenarios) // block

    def atoms(self, level: int) -> list[np.ndarray]:
        ids = self.atom_ids(level)
        return [np.flatnonzero(ids == a) for a in range(ids[-1] + 1)]

    def is_measurable(self, values: np.ndarray, level: int, tol: float = 0.0) -> bool:
        """True if per-scenario values are constant on every level atom."""
        ids = self.atom_ids(level)
        v = np.asarray(values)
        for a in range(ids[-1] + 1):
            block = v[ids == a]
            if np.any(np.abs(block - block[0]) > tol):
                return False
        return True

    def random_predictable(self, rng: np.random.Generator, n_steps: int, d: int = 1,
                           scale: float = 1.0) -> "PredictablePath":
        """Adapted random interval values: slot j drawn per level-j atom."""
        if self.is_tree:
            if n_steps != self.depth:
                raise ValueError("tree depth must match the time grid")
            vals = np.empty((self.n_scenarios, n_steps, d))
            for j in range(n_steps):
                ids = self.atom_ids(j)
                per_atom = rng.uniform(-scale, scale, size=(ids[-1] + 1, d))
                vals[:, j, :] = per_atom[ids]
        else:
            vals = rng.uniform(-scale, scale, size=(self.n_scenarios, n_steps, d))
        return PredictablePath(vals)


@dataclass(frozen=True)
class DriverSpec:
    """Parameters of a simulated driver; components are independent copies."""

    kind: str
    d: int = 1
    vol: float = 1.0
    drift: float = 0.0
    jump_rate: float = 0.0
    jump_mean: float = 0.0
    jump_std: float = 0.0

    def __post_init__(self):
        if self.kind not in ("brownian", "fv_drift", "compound_poisson", "mixture"):
            raise ValueError(f"unknown driver kind {self.kind!r}")
        if self.d < 1:
            raise ValueError("need d >= 1")
        if self.vol < 0 or self.jump_rate < 0 or self.jump_std < 0:
            raise ValueError("vol, jump_rate and jump_std must be nonnegative")

    @property
    def jump_second_moment(self) -> float:
        return self.jump_mean**2 + self.jump_std**2

    @property
    def has_jumps(self) -> bool:
        return self.kind in ("compound_poisson", "mixture") and self.jump_rate > 0


@dataclass
class PredictablePath:
    """Interval values, shape (P, N, d) or (1, N, d) for nonrandom paths."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise ValueError("predictable values must be (P, N, d)")
        self.values = v

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    def check_adapted(self, scenarios: ScenarioSet) -> None:
        """Assert slot j is known at t_j (constant on level-j atoms)."""
        if not scenarios.is_tree or self.values.shape[0] == 1:
            return
        for j in range(self.n_steps):
            if not scenarios.is_measurable(self.values[:, j, :], j):
                raise AssertionError(f"slot {j} is not measurable at its left endpoint")


class StoppingRule:
    """Per-scenario grid index in 0..N, with N + 1 as the never marker."""

    def __init__(self, indices: np.ndarray, n_steps: int):
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("stopping indices must be a vector")
        if np.any(idx < 0) or np.any(idx > n_steps + 1):
            raise ValueError("stopping index out of range")
        self.indices = idx
        self.n_steps = int(n_steps)
        self.indices.setflags(write=False)

    NEVER = property(lambda self: self.n_steps + 1)

    @classmethod
    def never(cls, scenarios: ScenarioSet, n_steps: int) -> "StoppingRule":
        return cls(np.full(scenarios.n_scenarios, n_steps + 1), n_steps)

    @classmethod
    def at_index(cls, scenarios: ScenarioSet, n_steps: int, index: int) -> "StoppingRule":
        return cls(np.full(scenarios.n_scenarios, index), n_steps)

    def increment_mask(self) -> np.ndarray:
        """(P, N) bool: slot j kept iff its right endpoint j + 1 <= tau - 1."""
        j = np.arange(self.n_steps)
        return (j[None, :] + 1) <= (self.indices[:, None] - 1)

    def pre_index(self) -> np.ndarray:
        """Grid index realising the left limit at tau (clipped to 0..N)."""
        return np.clip(self.indices - 1, 0, self.n_steps)

    def validate(self, scenarios: ScenarioSet) -> None:
        """Tree mode: {tau <= l} must be a union of level-l atoms."""
        if not scenarios.is_tree:
            return
        for level in range(self.n_steps + 1):
            hit = (self.indices <= level).astype(float)
            if not scenarios.is_measurable(hit, level):
                raise AssertionError(f"{{tau <= {level}}} is not a union of level atoms")


@dataclass
class DriverPath:
    """Simulated driver ensemble with its control path attached."""

    spec: DriverSpec
    timegrid: TimeGrid
    scenarios: ScenarioSet
    values: np.ndarray  # (P, N + 1, d)
    control: np.ndarray  # (P, N + 1)
    jump_increments: np.ndarray | None = None  # (P, N, d) pure-jump part

    def __post_init__(self):
        P, n1, d = self.values.shape
        if P != self.scenarios.n_scenarios or n1 != self.timegrid.n_steps + 1 or d != self.spec.d:
            raise ValueError("driver path shape mismatch")
        if np.any(np.diff(self.control, axis=1) < 0):
            raise ValueError("control path must be nondecreasing")
        if self.scenarios.is_tree:
            for level in range(self.timegrid.n_steps + 1):
                if not self.scenarios.is_measurable(self.values[:, level, :], level):
                    raise AssertionError(f"driver not adapted at level {level}")

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=1)

    def decomposition_paths(self) -> tuple[np.ndarray, np.ndarray]:
        """Bracket path of the martingale part and variation of the FV part.

        Only defined for scalar drivers; idealized closed forms for the
        continuous parts, realized slot sums for jumps (multiple jumps in
        one slot are seen at slot resolution).
        """
        if self.spec.d != 1:
            raise ValueError("decomposition paths are scalar-driver only")
        t = self.timegrid.times
        P = self.scenarios.n_scenarios
        qv = np.zeros((P, len(t)))
        var_a = np.zeros((P, len(t)))
        if self.spec.kind in ("brownian", "mixture"):
            qv += self.spec.vol**2 * t[None, :]
        if self.spec.kind in ("fv_drift", "mixture"):
            var_a += abs(self.spec.drift) * t[None, :]
        if self.jump_increments is not None:
            jump_var = np.cumsum(np.abs(self.jump_increments[:, :, 0]), axis=1)
            var_a[:, 1:] += jump_var
        return qv, var_a

    def to_csv(self, path) -> None:
        P, n1, d = self.values.shape
        scen = np.repeat(np.arange(P), n1)
        step = np.tile(np.arange(n1), P)
        cols = [scen, step] + [self.values[:, :, i].ravel() for i in range(d)]
        header = "scenario,step," + ",".join(f"s_{i}" for i in range(d))
        np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="", fmt="%.17g")


def chunk_generators(seed: int, n_scenarios: int) -> Iterator[tuple[int, int, np.random.Generator]]:
    """Deterministic per-chunk generators: scenario i lives in chunk i // SCENARIO_CHUNK."""
    n_chunks = (n_scenarios + SCENARIO_CHUNK - 1) // SCENARIO_CHUNK
    seeds = np.random.SeedSequence(seed).spawn(n_chunks)
    for c in range(n_chunks):
        lo = c * SCENARIO_CHUNK
        hi = min(lo + SCENARIO_CHUNK, n_scenarios)
        yield lo, hi, np.random.default_rng(seeds[c])


def sample_increments(spec: DriverSpec, timegrid: TimeGrid, rng: np.random.Generator,
                      n: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Increments (n, N, d) for one scenario block, plus the pure-jump part.

    Draw order per block is fixed (diffusion normals, Poisson counts, jump
    normals) so results are a deterministic function of the block seed.
    """
    N, d, dt = timegrid.n_steps, spec.d, timegrid.dt
    inc = np.zeros((n, N, d))
    jumps = None
    if spec.kind in ("brownian", "mixture") and spec.vol > 0:
        inc += spec.vol * math.sqrt(dt) * rng.standard_normal((n, N, d))
    if spec.kind in ("fv_drift", "mixture"):
        inc += spec.drift * dt
    if spec.kind in ("compound_poisson", "mixture") and spec.jump_rate > 0:
        counts = rng.poisson(spec.jump_rate * dt, size=(n, N, d))
        z = rng.standard_normal((n, N, d))
        jumps = counts * spec.jump_mean + spec.jump_std * np.sqrt(counts) * z
        inc += jumps
    return inc, jumps


def _tree_increments(spec: DriverSpec, timegrid: TimeGrid, scenarios: ScenarioSet) -> np.ndarray:
    if spec.kind in ("compound_poisson",) or spec.jump_rate > 0:
        raise ValueError("jump drivers are not supported in tree mode")
    if timegrid.n_steps != scenarios.depth:
        raise ValueError("tree depth must equal the number of time steps")
    b, dt = scenarios.branching, timegrid.dt
    if b == 2:
        branch_vals = np.array([-1.0, 1.0])
    elif b == 3:
        branch_vals = np.array([-math.sqrt(1.5), 0.0, math.sqrt(1.5)])
    else:
        raise ValueError("tree drivers support branching 2 or 3")
    digits = scenarios.digits()
    inc = np.zeros((scenarios.n_scenarios, timegrid.n_steps, spec.d))
    if spec.kind in ("brownian", "mixture") and spec.vol > 0:
        # same martingale increment in every component: mean 0, variance dt
        walk = spec.vol * math.sqrt(dt) * branch_vals[digits]
        inc += walk[:, :, None]
    if spec.kind in ("fv_drift", "mixture"):
        inc += spec.drift * dt
    return inc


def simulate_driver(spec: DriverSpec, timegrid: TimeGrid, scenarios: ScenarioSet) -> DriverPath:
    """Simulate the ensemble and attach the documented control path."""
    P, N, d = scenarios.n_scenarios, timegrid.n_steps, spec.d
    if scenarios.is_tree:
        inc = _tree_increments(spec, timegrid, scenarios)
        jumps = None
    else:
        inc = np.empty((P, N, d))
        jumps = np.zeros((P, N, d)) if spec.has_jumps else None
        for lo, hi, rng in chunk_generators(scenarios.seed, P):
            block, block_jumps = sample_increments(spec, timegrid, rng, hi - lo)
            inc[lo:hi] = block
            if block_jumps is not None:
                jumps[lo:hi] = block_jumps
    values = np.concatenate([np.zeros((P, 1, d)), np.cumsum(inc, axis=1)], axis=1)
    control = control_process(spec, timegrid, P)
    return DriverPath(spec, timegrid, scenarios, values, control, jump_increments=jumps)


def control_process(spec: DriverSpec, timegrid: TimeGrid, n_scenarios: int) -> np.ndarray:
    """Documented control path per driver kind, broadcast over scenarios."""
    t = timegrid.times
    if spec.kind == "brownian":
        v = spec.vol**2 * t
    elif spec.kind == "fv_drift":
        v = (abs(spec.drift) + EPS_FV) * t
    elif spec.kind == "compound_poisson":
        v = C_MIX * (1.0 + spec.jump_rate * spec.jump_second_moment) * t
    else:  # mixture
        rate_term = spec.jump_rate * spec.jump_second_moment
        v = C_MIX * (spec.vol**2 + abs(spec.drift) + rate_term) * t
    return np.broadcast_to(v, (n_scenarios, len(t))).copy()


def _masked_increments(S: DriverPath, upto: StoppingRule | None) -> np.ndarray:
    inc = S.increments
    if upto is None:
        return inc
    if upto.n_steps != S.timegrid.n_steps:
        raise ValueError("stopping rule grid mismatch")
    return inc * upto.increment_mask()[:, :, None]


def ito_integral(H: PredictablePath, S: DriverPath, upto: StoppingRule | None = None) -> np.ndarray:
    """Pathwise integral sum_j H_j . (S_{j+1} - S_j), null at 0; shape (P, N + 1).

    With ``upto`` the integral of H against the driver frozen strictly
    before tau: only increments with right endpoint <= tau - 1 contribute.
    """
    if H.n_steps != S.timegrid.n_steps:
        raise ValueError("time grid mismatch between integrand and driver")
    if H.d != S.spec.d:
        raise ValueError("component count mismatch")
    inc = _masked_increments(S, upto)
    contrib = np.sum(H.values * inc, axis=2)
    P = inc.shape[0]
    out = np.zeros((P, S.timegrid.n_steps + 1))
    np.cumsum(contrib, axis=1, out=out[:, 1:])
    return out


def energy_integral(H: PredictablePath | np.ndarray, A: np.ndarray) -> np.ndarray:
    """Quadratic accumulation sum_{j < l} |H_j|^2 (A_{j+1} - A_j); shape (P, N + 1)."""
    vals = H.values if isinstance(H, PredictablePath) else np.asarray(H, float)
    if vals.ndim == 2:
        vals = vals[:, :, None]
    dA = np.diff(A, axis=1)
    if np.any(dA < 0):
        raise ValueError("integrator must be nondecreasing")
    sq = np.sum(vals * vals, axis=2)
    contrib = sq * dA
    P = max(sq.shape[0], A.shape[0])
    out = np.zeros((P, A.shape[1]))
    np.cumsum(np.broadcast_to(contrib, (P, contrib.shape[1])), axis=1, out=out[:, 1:])
    return out


def stopping_weights(tau: StoppingRule, V: np.ndarray, scenarios: ScenarioSet) -> np.ndarray:
    """Weights of the pre-tau L2 measure on (scenario, slot); shape (P, N).

    weight(p, j) = prob(p) * V_{tau-}(p) * (V_{j+1} - V_j)(p) for kept
    slots, zero otherwise.  The weighted sum of |H|^2 over (p, j) equals
    the expectation of V_{tau-} times the energy integral of H before tau.
    """
    v_pre = V[np.arange(V.shape[0]), tau.pre_index()]
    dV = np.diff(V, axis=1)
    return scenarios.probs[:, None] * v_pre[:, None] * dV * tau.increment_mask()


def weighted_l2_sq(weights: np.ndarray, values: np.ndarray) -> float:
    """Squared L2 norm of interval values against stopping weights."""
    v = values if values.ndim == 3 else values[:, :, None]
    sq = np.sum(v * v, axis=2)
    return float(np.sum(np.broadcast_to(sq, weights.shape) * weights))


def localizing_sequence(V: np.ndarray, levels: Sequence[float], scenarios: ScenarioSet,
                        extra: np.ndarray | None = None) -> list[StoppingRule]:
    """First-passage rules tau_M = first index where V (or extra) reaches M."""
    n_steps = V.shape[1] - 1
    watched = V if extra is None else np.maximum(V, extra)
    rules = []
    for M in levels:
        hit = watched >= M
        idx = np.where(hit.any(axis=1), hit.argmax(axis=1), n_steps + 1)
        rule = StoppingRule(idx, n_steps)
        rule.validate(scenarios)
        rules.append(rule)
    return rules


def control_inequality_check(S: DriverPath, V: np.ndarray, integrands: Sequence[PredictablePath],
                             tau: StoppingRule) -> dict:
    """Monte Carlo check of the control inequality for very simple integrands.

    For each H compares lhs = E[sup_{l <= tau-1} |(H . S)_l|^2] with
    rhs = E[V_{tau-} * energy(H, V)_{tau-}]; the margin rhs - lhs is
    reported with the standard error of the per-scenario differences.
    """
    probs = S.scenarios.probs
    v_pre = V[np.arange(V.shape[0]), tau.pre_index()]
    rows = []
    for H in integrands:
        stopped = ito_integral(H, S, upto=tau)
        lhs_p = np.max(stopped**2, axis=1)
        energy = energy_integral(H, V)
        d_pre = energy[np.arange(energy.shape[0]), tau.pre_index()]
        rhs_p = v_pre * d_pre
        lhs = float(probs @ lhs_p)
        rhs = float(probs @ rhs_p)
        diff = rhs_p - lhs_p
        mean_diff = float(probs @ diff)
        var_diff = float(probs @ (diff - mean_diff) ** 2)
        se = math.sqrt(var_diff / len(diff))
        rows.append({"lhs": lhs, "rhs": rhs, "margin": rhs - lhs, "se": se})
    worst = min(rows, key=lambda r: r["margin"] + 3 * r["se"])
    return {"per_integrand": rows, "min_margin": worst["margin"], "min_margin_se": worst["se"]}
