"""Lifting of non-homogeneous slip-wall data to divergence-free channel fields.

Boundary data is a pair of wall traces: a prescribed normal velocity `a`
and a prescribed tangential stress `b`, each a truncated Fourier series per
wall with piecewise-linear time dependence.  The lifting runs in two stages
per wavenumber:

1. a harmonic potential whose normal derivative matches `a` (closed-form
   cosh/sinh profiles, a linear profile for the mean mode), giving c = grad h;
2. a stationary Stokes correction with zero normal trace whose tangential
   stress supplies the remainder b - [2 D(c) n + alpha c] . tau, solved as a
   symmetric-definite 1D system in streamfunction form.

Both stages are linear, so unit responses per control degree of freedom are
precomputed once and superposed.

Trace regularity is measured by a Fourier-multiplier surrogate of the mixed
fractional wall norm: a term of differential order s contributes
sqrt(L_x * sum_walls sum_j (1 + k_j^2)^s |f_j|^2), and the exponent p enters
only through the orders 1 - 1/p (for a) and -1/p (for b).  This keeps the
scaling structure of the continuous norms while remaining a quadratic form
of the coefficients; it is the one deliberate modelling simplification of
this module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .basis import ModeField
from .geometry import Grid

__all__ = [
    "LiftingError",
    "CompatibilityError",
    "BoundaryControl",
    "project_compatible",
    "solve_harmonic",
    "StokesCorrectionSolver",
    "LiftingCache",
    "LiftedField",
    "lift",
    "trace_norm",
    "trace_norm_series",
]

KIND_A = "a"
KIND_B = "b"
TRACES = ((KIND_A, 0), (KIND_A, 1), (KIND_B, 0), (KIND_B, 1))


class LiftingError(RuntimeError):
    """Lifting solver failure."""


class CompatibilityError(LiftingError):
    """Net inflow does not balance net outflow."""


@dataclass(eq=False)
class BoundaryControl:
    """Wall data (a, b) as per-wall Fourier coefficients on a time grid.

    Coefficients are stored as a flat real vector per time point; each of
    the four traces (a-bottom, a-top, b-bottom, b-top) occupies a block
    [mean, re_1, im_1, ..., re_K, im_K].  Values between grid points are
    piecewise linear, so time derivatives are segment slopes.
    """

    length_x: float
    n_modes: int                 # Fourier modes per wall beyond the mean
    t_grid: np.ndarray           # (n_t,) increasing, t_grid[0] = 0
    gamma: np.ndarray            # (n_t, n_dofs)
    p: float = 4.0

    def __post_init__(self):
        self.t_grid = np.asarray(self.t_grid, float)
        self.gamma = np.asarray(self.gamma, float)
        if self.t_grid.ndim != 1 or self.t_grid.size < 1:
            raise LiftingError("time grid must hold at least one point")
        if self.gamma.shape != (self.t_grid.size, self.n_dofs):
            raise LiftingError(
                f"gamma must have shape {(self.t_grid.size, self.n_dofs)}"
            )
        if not 2.0 < self.p < np.inf:
            raise LiftingError("trace exponent p must lie in (2, inf)")

    # -- layout ---------------------------------------------------------

    @property
    def block(self) -> int:
        return 2 * self.n_modes + 1

    @property
    def n_dofs(self) -> int:
        return 4 * self.block

    @classmethod
    def zeros(cls, length_x, n_modes, t_grid, p=4.0) -> "BoundaryControl":
        t = np.atleast_1d(np.asarray(t_grid, float))
        return cls(length_x, n_modes, t, np.zeros((t.size, 4 * (2 * n_modes + 1))), p)

    def dof_index(self, kind: str, wall: str, j: int, part: str = "re") -> int:
        w = 0 if wall == "bottom" else 1
        t = TRACES.index((kind, w))
        if j == 0:
            if part != "re":
                raise LiftingError("mean mode has no imaginary part")
            return t * self.block
        off = 1 + 2 * (j - 1) + (0 if part == "re" else 1)
        return t * self.block + off

    def coeffs(self, gamma_row: np.ndarray) -> np.ndarray:
        """(4, n_modes+1) complex coefficient table for one time point."""
        out = np.zeros((4, self.n_modes + 1), complex)
        for t in range(4):
            blk = gamma_row[t * self.block : (t + 1) * self.block]
            out[t, 0] = blk[0]
            if self.n_modes:
                out[t, 1:] = blk[1::2] + 1j * blk[2::2]
        return out

    def interp(self, t: float):
        """Piecewise-linear value and slope of the coefficient vector at t."""
        tg = self.t_grid
        if tg.size == 1:
            return self.gamma[0].copy(), np.zeros(self.n_dofs)
        if t < tg[0] - 1e-12 or t > tg[-1] + 1e-12:
            raise LiftingError(f"time {t} outside the control horizon")
        s = min(int(np.searchsorted(tg, t, side="right")) - 1, tg.size - 2)
        s = max(s, 0)
        dt = tg[s + 1] - tg[s]
        slope = (self.gamma[s + 1] - self.gamma[s]) / dt
        return self.gamma[s] + (t - tg[s]) * slope, slope

    def copy(self) -> "BoundaryControl":
        return BoundaryControl(
            self.length_x, self.n_modes, self.t_grid.copy(), self.gamma.copy(), self.p
        )

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "length_x": self.length_x,
            "n_modes": self.n_modes,
            "p": self.p,
            "t_grid": self.t_grid.tolist(),
            "traces": [
                {"kind": k, "wall": ("bottom", "top")[w]}
                for k, w in TRACES
            ],
            "gamma": self.gamma.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BoundaryControl":
        return cls(
            length_x=float(data["length_x"]),
            n_modes=int(data["n_modes"]),
            t_grid=np.asarray(data["t_grid"], float),
            gamma=np.asarray(data["gamma"], float),
            p=float(data["p"]),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "BoundaryControl":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def project_compatible(ctrl: BoundaryControl) -> BoundaryControl:
    """Orthogonal projection onto zero net normal flux through the walls.

    Only the two mean coefficients of `a` are touched: they are replaced by
    their antisymmetric part, which is the nearest compatible point in
    coefficient space.  Idempotent.
    """
    out = ctrl.copy()
    ib = ctrl.dof_index(KIND_A, "bottom", 0)
    it = ctrl.dof_index(KIND_A, "top", 0)
    mean = 0.5 * (out.gamma[:, ib] - out.gamma[:, it])
    out.gamma[:, ib] = mean
    out.gamma[:, it] = -mean
    return out


def compatibility_residual(ctrl: BoundaryControl) -> float:
    ib = ctrl.dof_index(KIND_A, "bottom", 0)
    it = ctrl.dof_index(KIND_A, "top", 0)
    return float(np.abs(ctrl.gamma[:, ib] + ctrl.gamma[:, it]).max())


# -- trace norms --------------------------------------------------------------


def _multiplier_norm_sq(coeff_b, coeff_t, order, kx, length_x) -> float:
    mult = (1.0 + kx * kx) ** order
    tot = mult[0] * (abs(coeff_b[0]) ** 2 + abs(coeff_t[0]) ** 2)
    tot += 2.0 * float(
        mult[1:] @ (np.abs(coeff_b[1:]) ** 2 + np.abs(coeff_t[1:]) ** 2)
    )
    return length_x * tot


def _hp_norm(table, dtable, p, kx, length_x) -> float:
    def term(cb, ct, s):
        return np.sqrt(_multiplier_norm_sq(cb, ct, s, kx, length_x))

    return (
        term(table[0], table[1], 1.0 - 1.0 / p)
        + term(dtable[0], dtable[1], 0.5)
        + term(table[2], table[3], -1.0 / p)
        + term(table[2], table[3], 0.0)
        + term(dtable[2], dtable[3], -0.5)
    )


def trace_norm(ctrl: BoundaryControl, t: float) -> float:
    """Mixed fractional wall norm of (a, b) at time t (multiplier surrogate)."""
    kx = 2.0 * np.pi * np.arange(ctrl.n_modes + 1) / ctrl.length_x
    row, slope = ctrl.interp(t)
    return _hp_norm(ctrl.coeffs(row), ctrl.coeffs(slope), ctrl.p, kx, ctrl.length_x)


def trace_norm_series(ctrl: BoundaryControl, times: np.ndarray) -> np.ndarray:
    return np.array([trace_norm(ctrl, float(t)) for t in np.asarray(times)])


# -- harmonic stage -----------------------------------------------------------


@dataclass(eq=False)
class HarmonicLift:
    """Potential-gradient field c = grad h matching the normal data."""

    field: ModeField
    # closed-form wall data needed for the tangential-stress correction
    h_wall: np.ndarray      # (n_modes+1, 2) potential profile at walls
    dh_wall: np.ndarray     # (n_modes+1, 2) wall-normal derivative at walls
    laplacian_residual: float


def solve_harmonic(a_bottom, a_top, grid: Grid, n_modes: int) -> HarmonicLift:
    """Neumann potential per mode: h'' = k^2 h with -h'(0)=a_b, h'(1)=a_t.

    The mean mode reduces to a linear profile and is solvable only under the
    zero-net-flux compatibility a_b(0) + a_t(0) = 0; the potential is pinned
    by a zero boundary mean.  Returns the gradient as a velocity field plus
    the wall data needed downstream.
    """
    a_bottom = np.asarray(a_bottom, complex)
    a_top = np.asarray(a_top, complex)
    scale = max(np.abs(a_bottom).max(), np.abs(a_top).max(), 1e-30)
    if abs(a_bottom[0] + a_top[0]) > 1e-12 * scale:
        raise CompatibilityError(
            "mean normal data does not cancel across the walls"
        )
    f = ModeField.zeros(grid)
    h_wall = np.zeros((n_modes + 1, 2), complex)
    dh_wall = np.zeros((n_modes + 1, 2), complex)
    yq = grid.y_nodes

    # mean mode: h = c0 + c1 y, c1 = -a_b(0); vertical through-flow (0, c1)
    c1 = -a_bottom[0]
    c0 = -0.5 * c1
    f.vals[0, 1] = c1
    f.wall_vals[0, 1] = (c1, c1)
    h_wall[0] = (c0, c0 + c1)
    dh_wall[0] = (c1, c1)

    lap = 0.0
    for j in range(1, n_modes + 1):
        k = grid.kx[j]
        sh, ch = np.sinh(k), np.cosh(k)
        bb = -a_bottom[j] / k
        aa = (a_top[j] + a_bottom[j] * ch) / (k * sh)
        h = aa * np.cosh(k * yq) + bb * np.sinh(k * yq)
        dh = k * (aa * np.sinh(k * yq) + bb * np.cosh(k * yq))
        d2h = k * k * h
        f.vals[j, 0] = 1j * k * h
        f.vals[j, 1] = dh
        f.dvals[j, 0] = 1j * k * dh
        f.dvals[j, 1] = d2h
        h0, h1 = aa, aa * ch + bb * sh
        dh0, dh1 = k * bb, k * (aa * sh + bb * ch)
        f.wall_vals[j, 0] = (1j * k * h0, 1j * k * h1)
        f.wall_vals[j, 1] = (dh0, dh1)
        f.wall_dvals[j, 0] = (1j * k * dh0, 1j * k * dh1)
        f.wall_dvals[j, 1] = (k * k * h0, k * k * h1)
        h_wall[j] = (h0, h1)
        dh_wall[j] = (dh0, dh1)
    return HarmonicLift(field=f, h_wall=h_wall, dh_wall=dh_wall, laplacian_residual=lap)


def harmonic_stress_trace(lift_h: HarmonicLift, grid: Grid, alpha: float, n_modes: int):
    """Coefficients of [2 D(c) n + alpha c] . tau on each wall for c = grad h."""
    out = np.zeros((n_modes + 1, 2), complex)
    for j in range(1, n_modes + 1):
        k = grid.kx[j]
        h0, h1 = lift_h.h_wall[j]
        dh0, dh1 = lift_h.dh_wall[j]
        out[j, 0] = 1j * k * (alpha * h0 - 2.0 * dh0)
        out[j, 1] = -1j * k * (2.0 * dh1 + alpha * h1)
    # mean mode: c is a constant vertical flow, D(c) = 0 and c . tau = 0
    return out


# -- Stokes correction stage --------------------------------------------------


class StokesCorrectionSolver:
    """Per-mode stationary Stokes solves with prescribed tangential stress.

    Seeks a divergence-free field with zero normal trace whose tangential
    stress equals the given wall data, variationally: the energy form tested
    against all admissible fields equals the wall pairing with the data.  The
    mean mode runs on zero-mean shear profiles, which fixes the one-parameter
    indeterminacy of the periodic channel (a mean pressure gradient appears
    implicitly as the Lagrange multiplier of that constraint).
    """

    def __init__(self, grid: Grid, alpha: float, n_modes: int):
        from .basis import mode_pencil, shear_pencil, _zero_mean_nullspace

        if n_modes > grid.spec.modes_x:
            raise LiftingError("control modes exceed the resolved band")
        self.grid = grid
        self.alpha = float(alpha)
        self.n_modes = n_modes
        lx = grid.spec.length_x

        self._z = _zero_mean_nullspace(grid)
        a0, _ = shear_pencil(grid, alpha)
        self._shear_fact = scipy.linalg.cho_factor(self._z.T @ a0 @ self._z)

        n_y = grid.n_y
        self._interior = np.zeros((n_y, n_y - 2))
        self._interior[1:-1] = np.eye(n_y - 2)
        self._mode_facts = []
        for j in range(1, n_modes + 1):
            aj, _ = mode_pencil(grid, j, alpha)
            red = self._interior.T @ aj @ self._interior
            try:
                self._mode_facts.append(scipy.linalg.cho_factor(red))
            except scipy.linalg.LinAlgError as exc:  # pragma: no cover
                raise LiftingError(f"singular correction system at mode {j}") from exc
        self._lx = lx
        self._r0 = grid.d1[0]
        self._r1 = grid.d1[-1]

    def solve(self, bt_bottom, bt_top) -> ModeField:
        """Correction field for tangential-stress coefficients per wall."""
        g = self.grid
        bt_bottom = np.asarray(bt_bottom, complex)
        bt_top = np.asarray(bt_top, complex)
        out = ModeField.zeros(g)

        # mean mode on zero-mean shear profiles; mean data of a real trace is real
        rhs = np.zeros(g.n_y)
        rhs[0] = self._lx * bt_bottom[0].real
        rhs[-1] = -self._lx * bt_top[0].real
        u0 = self._z @ scipy.linalg.cho_solve(self._shear_fact, self._z.T @ rhs)
        sh = ModeField.from_shear_profile(g, u0)
        out.vals[0] = sh.vals[0]
        out.dvals[0] = sh.dvals[0]
        out.wall_vals[0] = sh.wall_vals[0]
        out.wall_dvals[0] = sh.wall_dvals[0]

        for j in range(1, self.n_modes + 1):
            rhs_full = 0.5 * self._lx * (bt_bottom[j] * self._r0 - bt_top[j] * self._r1)
            rr = self._interior.T @ rhs_full
            fact = self._mode_facts[j - 1]
            phi_int = scipy.linalg.cho_solve(fact, rr.real) + 1j * scipy.linalg.cho_solve(
                fact, rr.imag
            )
            phi = np.zeros(g.n_y, complex)
            phi[1:-1] = phi_int
            mf = ModeField.from_streamfunction(g, j, phi, "complex")
            out.vals[j] = mf.vals[j]
            out.dvals[j] = mf.dvals[j]
            out.wall_vals[j] = mf.wall_vals[j]
            out.wall_dvals[j] = mf.wall_dvals[j]
        return out


def lift_static_coeffs(table, grid: Grid, alpha: float, n_modes: int,
                       solver: StokesCorrectionSolver | None = None) -> ModeField:
    """Lift one coefficient table (4, n_modes+1): harmonic stage plus correction."""
    if solver is None:
        solver = StokesCorrectionSolver(grid, alpha, n_modes)
    har = solve_harmonic(table[0], table[1], grid, n_modes)
    stress = harmonic_stress_trace(har, grid, alpha, n_modes)
    corr = solver.solve(table[2] - stress[:, 0], table[3] - stress[:, 1])
    return har.field + corr


# -- unit-response cache ------------------------------------------------------


class LiftingCache:
    """Unit lifted fields per control degree of freedom (compatible projection).

    Each stored field is the lifting of one projected unit coefficient, so
    any compatible coefficient vector lifts by superposition.  The cache is
    immutable after construction and safe to share.
    """

    def __init__(self, grid: Grid, alpha: float, n_modes: int, p: float = 4.0):
        self.grid = grid
        self.alpha = float(alpha)
        self.n_modes = n_modes
        self.p = p
        proto = BoundaryControl.zeros(grid.spec.length_x, n_modes, [0.0], p)
        self.n_dofs = proto.n_dofs
        solver = StokesCorrectionSolver(grid, alpha, n_modes)
        fields = []
        for c in range(self.n_dofs):
            unit = BoundaryControl.zeros(grid.spec.length_x, n_modes, [0.0], p)
            unit.gamma[0, c] = 1.0
            unit = project_compatible(unit)
            table = unit.coeffs(unit.gamma[0])
            fields.append(lift_static_coeffs(table, grid, alpha, n_modes, solver))
        self.fields = fields
        self.stack_vals = np.stack([f.vals for f in fields])
        self.stack_dvals = np.stack([f.dvals for f in fields])
        self.stack_wall = np.stack([f.wall_vals for f in fields])
        self.stack_wall_d = np.stack([f.wall_dvals for f in fields])

    def field(self, gamma_row) -> ModeField:
        return ModeField.combine(
            np.asarray(gamma_row, float),
            self.stack_vals,
            self.stack_dvals,
            self.stack_wall,
            self.stack_wall_d,
            self.grid,
        )


@dataclass(eq=False)
class LiftedField:
    """Lifted boundary data over the control time grid."""

    ctrl: BoundaryControl
    cache: LiftingCache
    trace_norms: np.ndarray = field(init=False)

    def __post_init__(self):
        self.trace_norms = trace_norm_series(self.ctrl, self.ctrl.t_grid)

    def field_at(self, t: float) -> ModeField:
        row, _ = self.ctrl.interp(t)
        return self.cache.field(row)

    def dt_field_at(self, t: float) -> ModeField:
        _, slope = self.ctrl.interp(t)
        return self.cache.field(slope)

    def boundary_residuals(self) -> dict:
        """Worst-case coefficient-space residuals of the two wall conditions."""
        normal = 0.0
        tangential = 0.0
        divr = 0.0
        nm = self.ctrl.n_modes
        for ti, t in enumerate(self.ctrl.t_grid):
            table = self.ctrl.coeffs(self.ctrl.gamma[ti])
            f = self.field_at(float(t))
            ntr = f.normal_trace_coeffs()[: nm + 1]
            normal = max(
                normal,
                np.abs(ntr[:, 0] - table[0]).max(),
                np.abs(ntr[:, 1] - table[1]).max(),
            )
            stress = f.tangential_stress_coeffs(self.cache.alpha)[: nm + 1]
            tangential = max(
                tangential,
                np.abs(stress[:, 0] - table[2]).max(),
                np.abs(stress[:, 1] - table[3]).max(),
            )
            divr = max(divr, f.divergence_residual())
        return {"normal": normal, "tangential": tangential, "divergence": divr}


def lift(ctrl: BoundaryControl, cache: LiftingCache) -> LiftedField:
    """Lift a compatible control; raises if the compatibility constraint fails."""
    if compatibility_residual(ctrl) > 1e-10 * max(1.0, np.abs(ctrl.gamma).max()):
        raise CompatibilityError("control violates the zero-net-flux constraint")
    if ctrl.n_modes != cache.n_modes:
        raise LiftingError("control and cache mode counts differ")
    return LiftedField(ctrl=ctrl, cache=cache)
