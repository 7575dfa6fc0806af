"""Discrete 2-D Poisson problem and a geometric multigrid solver.

The level-1 operator is the 5-point stencil applied with zero padding
(a Dirichlet-type truncation at the boundary, which makes it SPD); coarse
operators come from Galerkin triple products R A P with R = P^T.  Smoothing
is damped Jacobi expressed as a fixed convolution kernel, so the whole
fine-to-coarse sweep is a chain of convolutions apart from the dense coarse
operators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid_transfer import (GridHierarchy, ProlongationMode, prolongate,
                            prolongation_matrix, restrict_kr)
from .tensor_core import ContractViolation, ConvKernel, PaddingMode, conv2d

POISSON_STENCIL = np.array([[0.0, -1.0, 0.0],
                            [-1.0, 4.0, -1.0],
                            [0.0, -1.0, 0.0]])


def poisson_kernel() -> ConvKernel:
    """The 3x3 stencil as a single-channel convolution kernel."""
    return ConvKernel.from_matrix(POISSON_STENCIL)


@dataclass(frozen=True)
class SmootherSpec:
    """Damped Jacobi smoother; one plain step or two steps fused into a kernel."""

    omega: float = 0.8
    steps: int = 1

    def __post_init__(self):
        if not 0.0 < self.omega < 2.0:
            raise ContractViolation(f"omega must lie in (0, 2), got {self.omega}")
        if self.steps not in (1, 2):
            raise ContractViolation(f"steps must be 1 or 2, got {self.steps}")

    def kernel(self) -> ConvKernel:
        w = self.omega
        if self.steps == 1:
            return ConvKernel.from_matrix(np.array([[w / 4.0]]))
        center = w * (2.0 - w) / 4.0
        cross = w * w / 16.0
        return ConvKernel.from_matrix(np.array([[0.0, cross, 0.0],
                                                [cross, center, cross],
                                                [0.0, cross, 0.0]]))


@dataclass
class StencilOperator:
    """Per-level operator: a kernel when one exists, always a dense matrix."""

    level: int
    shape: tuple
    dense: np.ndarray
    kernel: ConvKernel | None = None

    def apply(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != self.shape:
            raise ContractViolation(
                f"level {self.level} operator expects shape {self.shape}, got {u.shape}")
        if self.kernel is not None:
            return conv2d(u[:, :, None], self.kernel, 1, PaddingMode.ZERO)[:, :, 0]
        return (self.dense @ u.ravel()).reshape(self.shape)


def _dense_from_stencil(m: int, n: int) -> np.ndarray:
    """Assemble the zero-padded 5-point operator as an (mn, mn) matrix."""
    size = m * n
    a = np.zeros((size, size))
    for i in range(m):
        for j in range(n):
            row = i * n + j
            a[row, row] = 4.0
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ii, jj = i + di, j + dj
                if 0 <= ii < m and 0 <= jj < n:
                    a[row, ii * n + jj] = -1.0
    return a


class PoissonHierarchy:
    """Grids, transfer matrices and Galerkin operators for one problem size."""

    def __init__(self, m: int, n: int | None = None, levels: int = 2,
                 mode: ProlongationMode = ProlongationMode.LINEAR):
        n = m if n is None else n
        self.grids = GridHierarchy.nodal(m, n, levels)
        self.mode = mode
        self._prolong = []   # dense P, level l+1 -> l
        self._ops = [StencilOperator(1, (m, n), _dense_from_stencil(m, n),
                                     poisson_kernel())]
        for l in range(1, levels):
            cm, cn = self.grids.size(l + 1)
            p = prolongation_matrix(cm, cn, mode)
            self._prolong.append(p)
            coarse = p.T @ self._ops[-1].dense @ p
            self._ops.append(StencilOperator(l + 1, (cm, cn), coarse))

    @property
    def levels(self) -> int:
        return self.grids.levels

    def operator(self, level: int) -> StencilOperator:
        if not 1 <= level <= self.levels:
            raise ContractViolation(f"no operator at level {level} of {self.levels}")
        return self._ops[level - 1]

    def apply(self, u: np.ndarray, level: int) -> np.ndarray:
        """A^l u for the level-l grid."""
        return self.operator(level).apply(u)

    def coarsen(self, level: int) -> StencilOperator:
        """The Galerkin operator one level below `level` (cached)."""
        if level >= self.levels:
            raise ContractViolation(
                f"cannot coarsen below the coarsest level ({self.levels})")
        return self._ops[level]

    def prolong(self, coarse: np.ndarray, level: int) -> np.ndarray:
        """Transfer level l+1 values to level l by nodal interpolation."""
        return prolongate(coarse[:, :, None], self.mode)[:, :, 0]

    def restrict(self, fine: np.ndarray) -> np.ndarray:
        """Transfer to the next-coarser grid with the fixed 3x3 kernel (= P^T)."""
        return restrict_kr(fine[:, :, None], self.mode)[:, :, 0]

    def direct_solve(self, f: np.ndarray) -> np.ndarray:
        """Dense solve on the finest grid, used as the reference solution."""
        a = self._ops[0]
        return np.linalg.solve(a.dense, np.asarray(f, dtype=float).ravel()).reshape(a.shape)


def smooth(f: np.ndarray, spec: SmootherSpec) -> np.ndarray:
    """Apply the Jacobi kernel to a residual-style right-hand side."""
    f = np.asarray(f, dtype=float)
    return conv2d(f[:, :, None], spec.kernel(), 1, PaddingMode.ZERO)[:, :, 0]


@dataclass
class MgTrace:
    """Everything the fine-to-coarse sweep produced, per level."""

    f_levels: list = field(default_factory=list)      # f^l
    u_iterates: list = field(default_factory=list)    # [u^{l,0}, ..., u^{l,nu_l}]

    @property
    def solutions(self):
        """u^{l, nu_l} for every level."""
        return [us[-1] for us in self.u_iterates]


def _as_grid(f) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.ndim == 3 and f.shape[2] == 1:
        f = f[:, :, 0]
    if f.ndim != 2:
        raise ContractViolation(f"expected a single-channel grid, got shape {f.shape}")
    return f


def mg0(f, levels: int, nu, spec: SmootherSpec = SmootherSpec(),
        hierarchy: PoissonHierarchy | None = None) -> MgTrace:
    """Fine-to-coarse sweep: nu_l smoothings per level, then residual restriction.

    Starts every level from a zero guess; returns the full iterate history.
    """
    f = _as_grid(f)
    if len(nu) != levels:
        raise ContractViolation(f"nu must have {levels} entries, got {len(nu)}")
    if hierarchy is None:
        hierarchy = PoissonHierarchy(f.shape[0], f.shape[1], levels)
    if hierarchy.grids.size(1) != f.shape or hierarchy.levels < levels:
        raise ContractViolation("hierarchy does not match the right-hand side")
    trace = MgTrace()
    f_l = f
    for l in range(1, levels + 1):
        u = np.zeros_like(f_l)
        iterates = [u]
        for _ in range(nu[l - 1]):
            u = u + smooth(f_l - hierarchy.apply(u, l), spec)
            iterates.append(u)
        trace.f_levels.append(f_l)
        trace.u_iterates.append(iterates)
        if l < levels:
            f_l = hierarchy.restrict(f_l - hierarchy.apply(u, l))
    return trace


def backslash_mg(f, levels: int, nu, spec: SmootherSpec = SmootherSpec(),
                 hierarchy: PoissonHierarchy | None = None) -> np.ndarray:
    """One backslash cycle: the mg0 sweep plus coarse-to-fine corrections."""
    f = _as_grid(f)
    if hierarchy is None:
        hierarchy = PoissonHierarchy(f.shape[0], f.shape[1], levels)
    trace = mg0(f, levels, nu, spec, hierarchy)
    u = trace.solutions
    for l in range(levels - 1, 0, -1):
        u[l - 1] = u[l - 1] + hierarchy.prolong(u[l], l)
    return u[0]


@dataclass
class SolveResult:
    u: np.ndarray
    residual_norms: list
    cycles: int
    converged: bool


def solve_poisson(f, levels: int, nu=None, omega: float = 0.8, cycles: int = 50,
                  rtol: float = 1e-10, steps: int = 1,
                  hierarchy: PoissonHierarchy | None = None) -> SolveResult:
    """Iterate u <- u + MG(f - A u) until the residual drops by `rtol`."""
    f = _as_grid(f)
    nu = [2] * levels if nu is None else list(nu)
    spec = SmootherSpec(omega, steps)
    if hierarchy is None:
        hierarchy = PoissonHierarchy(f.shape[0], f.shape[1], levels)
    u = np.zeros_like(f)
    f_norm = float(np.linalg.norm(f))
    history = []
    if f_norm == 0.0:
        return SolveResult(u, [0.0], 0, True)
    for cycle in range(1, cycles + 1):
        r = f - hierarchy.apply(u, 1)
        u = u + backslash_mg(r, levels, nu, spec, hierarchy)
        res = float(np.linalg.norm(f - hierarchy.apply(u, 1)))
        history.append(res)
        if res <= rtol * f_norm:
            return SolveResult(u, history, cycle, True)
    return SolveResult(u, history, cycles, False)
