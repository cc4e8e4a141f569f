"""Atomic signed measures on a uniform grid over a compact interval.

Everything downstream of this module identifies, at finite resolution,

  * a compact space with the atoms ``z_j = j * T_K / J`` of a uniform grid,
  * a signed finite measure with its vector of atom weights,
  * a test function with its vector of values at the atoms (sup-norm <= 1
    for members of a :class:`TestFamily`),
  * a closed set with the indicator of its atoms.

Pairings, variation norms and Jordan decompositions are then finite sums
and exact.  The weak* topology is probed through a fixed countable family
of test functions via the metric

    delta(m, m') = sum_k 2**-k * |m(u_k) - m'(u_k)|,

which separates measures as soon as the family spans the grid-function
space (the default family starts with the atom indicator "hats", so it
does for ``k_max >= J + 1``).

Kernel-defined measures (a density against dz) assign atom ``j`` the mass
of the cell ``(z_{j-1}, z_j]`` (atom 0 owns the degenerate cell ``{0}`` and
carries no mass for absolutely continuous densities).  When an
antiderivative of the density is available the cell masses are exact, so
closed-form variation norms hold to machine precision; otherwise midpoint
quadrature is used.

All values are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "CompactGrid",
    "SignedMeasure",
    "SignedMeasureVec",
    "TestFamily",
    "total_variation",
    "pair",
    "jordan",
    "weak_star_delta",
    "build_test_family",
]


@dataclass(frozen=True)
class CompactGrid:
    """Uniform atoms 0 = z_0 < z_1 < ... < z_J = T_K on [0, T_K]."""

    endpoint: float
    n_cells: int  # J; the grid has J + 1 atoms

    def __post_init__(self):
        if self.endpoint <= 0:
            raise ValueError("grid endpoint must be positive")
        if self.n_cells < 1:
            raise ValueError("need at least one cell (two atoms)")

    @property
    def atoms(self) -> np.ndarray:
        return np.linspace(0.0, self.endpoint, self.n_cells + 1)

    @property
    def n_atoms(self) -> int:
        return self.n_cells + 1

    @property
    def cell_width(self) -> float:
        return self.endpoint / self.n_cells

    def indicator(self, lo_atom: int, hi_atom: int) -> np.ndarray:
        """Grid function I_{[z_lo, z_hi]} (inclusive atom index range)."""
        if not (0 <= lo_atom <= hi_atom <= self.n_cells):
            raise ValueError(f"atom range [{lo_atom}, {hi_atom}] not on grid")
        f = np.zeros(self.n_atoms)
        f[lo_atom : hi_atom + 1] = 1.0
        return f

    def resolve(self, point: float, tol: float = 1e-12) -> int:
        """Atom index of a coordinate; error if not on the grid."""
        idx = int(round(point / self.cell_width))
        if idx < 0 or idx > self.n_cells or abs(self.atoms[idx] - point) > tol:
            raise ValueError(f"{point} is not an atom of the grid")
        return idx

    def cell_masses(
        self,
        density: Callable[[np.ndarray], np.ndarray] | None = None,
        antiderivative: Callable[[np.ndarray], np.ndarray] | None = None,
    ) -> np.ndarray:
        """Per-atom masses of a density dz; exact when an antiderivative is given.

        Atom j owns the cell (z_{j-1}, z_j]; atom 0 carries no mass.
        """
        z = self.atoms
        w = np.zeros(self.n_atoms)
        if antiderivative is not None:
            prim = antiderivative(z)
            w[1:] = np.diff(prim)
        elif density is not None:
            mid = 0.5 * (z[:-1] + z[1:])
            w[1:] = density(mid) * self.cell_width
        else:
            raise ValueError("need a density or an antiderivative")
        return w


def _check_weights(grid: CompactGrid, weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape[-1] != grid.n_atoms:
        raise ValueError(f"expected {grid.n_atoms} weights, got {w.shape[-1]}")
    if not np.all(np.isfinite(w)):
        raise ValueError("measure weights must be finite")
    return w


@dataclass(frozen=True)
class SignedMeasure:
    """Signed finite measure: one weight per atom."""

    grid: CompactGrid
    weights: np.ndarray

    def __post_init__(self):
        w = _check_weights(self.grid, self.weights)
        if w.ndim != 1:
            raise ValueError("SignedMeasure weights must be one-dimensional")
        object.__setattr__(self, "weights", w)
        self.weights.setflags(write=False)

    def to_csv(self, path) -> None:
        rows = np.column_stack([self.grid.atoms, self.weights])
        np.savetxt(path, rows, delimiter=",", header="atom,weight", comments="", fmt="%.17g")

    def descriptor(self) -> dict:
        return {"T_K": self.grid.endpoint, "J": self.grid.n_cells, "d": 1}


@dataclass(frozen=True)
class SignedMeasureVec:
    """d signed measures sharing one grid; weights shaped (d, J + 1)."""

    grid: CompactGrid
    weights: np.ndarray

    def __post_init__(self):
        w = _check_weights(self.grid, self.weights)
        if w.ndim == 1:
            w = w[None, :]
        if w.ndim != 2:
            raise ValueError("SignedMeasureVec weights must be (d, J + 1)")
        object.__setattr__(self, "weights", w)
        self.weights.setflags(write=False)

    @property
    def d(self) -> int:
        return self.weights.shape[0]

    def component(self, i: int) -> SignedMeasure:
        return SignedMeasure(self.grid, self.weights[i].copy())

    def variation(self) -> np.ndarray:
        """Componentwise variation norms, a length-d vector."""
        return np.sum(np.abs(self.weights), axis=1)

    def pair(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != (self.grid.n_atoms,):
            raise ValueError("test function does not match the grid")
        return self.weights @ f

    def descriptor(self) -> dict:
        return {"T_K": self.grid.endpoint, "J": self.grid.n_cells, "d": self.d}

    def to_csv(self, path) -> None:
        cols = [self.grid.atoms] + [self.weights[i] for i in range(self.d)]
        header = "atom," + ",".join(f"weight_{i}" for i in range(self.d))
        np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="", fmt="%.17g")


def total_variation(m: SignedMeasure) -> float:
    """Variation norm: the total mass of |m|, i.e. sum_j |w_j|."""
    return float(np.sum(np.abs(m.weights)))


def pair(m: SignedMeasure, f: np.ndarray) -> float:
    """Integral of the grid function f against m: sum_j f(z_j) * w_j."""
    f = np.asarray(f, dtype=float)
    if f.shape != (m.grid.n_atoms,):
        raise ValueError("test function does not match the grid")
    return float(m.weights @ f)


def jordan(m: SignedMeasure) -> tuple[SignedMeasure, SignedMeasure]:
    """Split m = m_plus - m_minus into nonnegative parts with disjoint support."""
    plus = np.maximum(m.weights, 0.0)
    minus = np.maximum(-m.weights, 0.0)
    return SignedMeasure(m.grid, plus), SignedMeasure(m.grid, minus)


@dataclass(frozen=True)
class TestFamily:
    """Ordered test functions u_k with values in [-1, 1] and positive weights.

    ``functions`` has one row per u_k.  ``gammas`` are the aggregation
    weights 2**-k renormalised to sum to exactly 1; ``delta_weights`` are
    the raw 2**-k used by the weak* metric.
    """

    grid: CompactGrid
    functions: np.ndarray
    gammas: np.ndarray = field(init=False)
    delta_weights: np.ndarray = field(init=False)

    def __post_init__(self):
        funcs = np.asarray(self.functions, dtype=float)
        if funcs.ndim != 2 or funcs.shape[1] != self.grid.n_atoms:
            raise ValueError("test functions must be (k_max, J + 1)")
        if funcs.shape[0] < 1:
            raise ValueError("need at least one test function")
        if np.max(np.abs(funcs)) > 1.0 + 1e-15:
            raise ValueError("test functions must have sup-norm <= 1")
        object.__setattr__(self, "functions", funcs)
        k = np.arange(1, funcs.shape[0] + 1, dtype=float)
        raw = np.power(2.0, -k)
        gam = raw / raw.sum()
        # land the float sum on 1.0 exactly; the first (largest) weight
        # absorbs the residual so tail weights stay positive
        for _ in range(2):
            gam[0] += 1.0 - gam.sum()
        if np.any(gam <= 0.0):
            raise ValueError("aggregation weights must stay strictly positive")
        object.__setattr__(self, "gammas", gam)
        object.__setattr__(self, "delta_weights", raw)
        for arr in (self.functions, self.gammas, self.delta_weights):
            arr.setflags(write=False)

    @property
    def size(self) -> int:
        return self.functions.shape[0]

    def evaluate_measure(self, m: SignedMeasureVec | SignedMeasure) -> np.ndarray:
        """Pairings with every family member; shape (k_max,) or (k_max, d)."""
        if isinstance(m, SignedMeasure):
            return self.functions @ m.weights
        return self.functions @ m.weights.T


def weak_star_delta(
    m: SignedMeasure | SignedMeasureVec,
    m2: SignedMeasure | SignedMeasureVec,
    fam: TestFamily,
) -> float:
    """Truncated weak* metric sum_k 2**-k |m(u_k) - m'(u_k)|.

    For vector measures the componentwise pairing gap is aggregated with
    the Euclidean norm.
    """
    a = fam.evaluate_measure(m)
    b = fam.evaluate_measure(m2)
    diff = a - b
    if diff.ndim == 1:
        gaps = np.abs(diff)
    else:
        gaps = np.sqrt(np.sum(diff * diff, axis=1))
    return float(fam.delta_weights @ gaps)


def sign_pattern(grid: CompactGrid, code: int) -> np.ndarray:
    """Sign vector number ``code``: atom j gets (-1)**bit_j(code).

    Code 0 is the constant function 1; codes 0 .. 2**(J+1)-1 enumerate all
    sign vectors.
    """
    j = np.arange(grid.n_atoms)
    bits = (code >> j) & 1
    return 1.0 - 2.0 * bits


def build_test_family(grid: CompactGrid, k_max: int) -> TestFamily:
    """Default family: the J+1 atom hats, then sign patterns in binary order.

    Order (fixed): u_1 .. u_{J+1} are the indicator hats of atoms 0 .. J;
    u_{J+2}, u_{J+3}, ... are the +-1 sign vectors ``sign_pattern(grid, s)``
    for s = 0, 1, 2, ...  With ``k_max >= J + 1`` the family spans the
    grid-function space; with ``k_max >= (J + 1) + 2**(J+1)`` it contains
    every sign vector, so the family supremum of pairings attains the
    variation norm exactly.
    """
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    n = grid.n_atoms
    rows = []
    for j in range(min(k_max, n)):
        hat = np.zeros(n)
        hat[j] = 1.0
        rows.append(hat)
    code = 0
    while len(rows) < k_max:
        rows.append(sign_pattern(grid, code))
        code += 1
    return TestFamily(grid, np.array(rows))
