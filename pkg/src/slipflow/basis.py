"""Divergence-free velocity fields and the slip-wall Stokes eigenbasis.

Fields live in mode space: a real velocity field on the channel is stored as
complex Fourier-coefficient profiles

    v(x, y) = C_0(y) + 2 Re sum_{j>=1} C_j(y) exp(i k_j x),

with each profile sampled at the Gauss quadrature nodes together with its
wall-normal derivative and wall traces.  Divergence-free fields are built
from per-mode streamfunctions (j >= 1) and shear profiles (j = 0), which
makes the incompressibility constraint exact by construction.

The eigenbasis diagonalizes the strain-plus-friction energy form

    (v, z)_E = 2 int D(v):D(z) dx + alpha int_Gamma v . z

against the L2 mass form on the space of divergence-free fields with zero
normal trace; per wavenumber this reduces to a symmetric-definite 1D pencil.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .geometry import DomainSpec, Grid, GeometryError, build_grid

__all__ = [
    "BasisError",
    "ModeField",
    "Basis",
    "inner_h",
    "inner_v",
    "build_eigenbasis",
    "project",
    "korn_ratio",
    "save_basis",
    "load_basis",
]

FAMILY_SHEAR = 0
FAMILY_COS = 1
FAMILY_SIN = 2


class BasisError(RuntimeError):
    """Eigenbasis construction or field-algebra failure."""


def _check_same_grid(u: "ModeField", v: "ModeField"):
    if u.grid is not v.grid and (
        u.grid.n_q != v.grid.n_q
        or u.grid.n_y != v.grid.n_y
        or u.grid.spec != v.grid.spec
    ):
        raise GeometryError("fields live on different grids")


class ModeField:
    """Two-component velocity field in Fourier-mode representation.

    vals[j, c, q]   complex coefficient profile of component c at Gauss node q
    dvals           wall-normal derivative profiles
    wall_vals[j, c, w]   trace at wall w (0 = bottom, 1 = top)
    wall_dvals           wall-normal derivative traces
    """

    __slots__ = ("grid", "vals", "dvals", "wall_vals", "wall_dvals")

    def __init__(self, grid: Grid, vals, dvals, wall_vals, wall_dvals):
        self.grid = grid
        self.vals = np.asarray(vals, dtype=complex)
        self.dvals = np.asarray(dvals, dtype=complex)
        self.wall_vals = np.asarray(wall_vals, dtype=complex)
        self.wall_dvals = np.asarray(wall_dvals, dtype=complex)

    @property
    def n_modes(self) -> int:
        return self.vals.shape[0] - 1

    @classmethod
    def zeros(cls, grid: Grid, n_modes: int | None = None) -> "ModeField":
        j = (grid.spec.modes_x if n_modes is None else n_modes) + 1
        return cls(
            grid,
            np.zeros((j, 2, grid.n_q), complex),
            np.zeros((j, 2, grid.n_q), complex),
            np.zeros((j, 2, 2), complex),
            np.zeros((j, 2, 2), complex),
        )

    @classmethod
    def from_shear_profile(cls, grid: Grid, u_cgl: np.ndarray) -> "ModeField":
        """x-independent field (u(y), 0) from CGL nodal values."""
        f = cls.zeros(grid)
        du = grid.d1 @ u_cgl
        f.vals[0, 0] = grid.interp @ u_cgl
        f.dvals[0, 0] = grid.interp_d1 @ u_cgl
        f.wall_vals[0, 0] = (u_cgl[0], u_cgl[-1])
        f.wall_dvals[0, 0] = (du[0], du[-1])
        return f

    @classmethod
    def from_streamfunction(
        cls, grid: Grid, j: int, phi_cgl: np.ndarray, family: str = "complex"
    ) -> "ModeField":
        """Divergence-free mode-j field from a streamfunction profile.

        The velocity is (phi', -i k phi) in coefficient space.  `family`
        selects the real-field convention: "cos" and "sin" build the two
        H-orthogonal real fields of a real profile, "complex" uses the
        profile directly as the complex coefficient.
        """
        if j < 1 or j > grid.spec.modes_x:
            raise BasisError(f"mode {j} outside resolved band")
        scale = {"complex": 1.0, "cos": 0.5, "sin": -0.5j}[family]
        k = grid.kx[j]
        phi = np.asarray(phi_cgl, dtype=complex) * scale
        dphi = grid.d1 @ phi
        d2phi = grid.d2 @ phi
        f = cls.zeros(grid)
        f.vals[j, 0] = grid.interp @ dphi
        f.vals[j, 1] = -1j * k * (grid.interp @ phi)
        f.dvals[j, 0] = grid.interp_d2 @ phi
        f.dvals[j, 1] = -1j * k * (grid.interp @ dphi)
        f.wall_vals[j, 0] = (dphi[0], dphi[-1])
        f.wall_vals[j, 1] = (-1j * k * phi[0], -1j * k * phi[-1])
        f.wall_dvals[j, 0] = (d2phi[0], d2phi[-1])
        f.wall_dvals[j, 1] = (-1j * k * dphi[0], -1j * k * dphi[-1])
        return f

    @classmethod
    def combine(cls, weights, stack_vals, stack_dvals, stack_wall, stack_wall_d, grid):
        w = np.asarray(weights)
        return cls(
            grid,
            np.tensordot(w, stack_vals, axes=1),
            np.tensordot(w, stack_dvals, axes=1),
            np.tensordot(w, stack_wall, axes=1),
            np.tensordot(w, stack_wall_d, axes=1),
        )

    # -- algebra -----------------------------------------------------------

    def copy(self) -> "ModeField":
        return ModeField(
            self.grid,
            self.vals.copy(),
            self.dvals.copy(),
            self.wall_vals.copy(),
            self.wall_dvals.copy(),
        )

    def __add__(self, other: "ModeField") -> "ModeField":
        _check_same_grid(self, other)
        return ModeField(
            self.grid,
            self.vals + other.vals,
            self.dvals + other.dvals,
            self.wall_vals + other.wall_vals,
            self.wall_dvals + other.wall_dvals,
        )

    def __sub__(self, other: "ModeField") -> "ModeField":
        _check_same_grid(self, other)
        return ModeField(
            self.grid,
            self.vals - other.vals,
            self.dvals - other.dvals,
            self.wall_vals - other.wall_vals,
            self.wall_dvals - other.wall_dvals,
        )

    def __mul__(self, c) -> "ModeField":
        return ModeField(
            self.grid,
            self.vals * c,
            self.dvals * c,
            self.wall_vals * c,
            self.wall_dvals * c,
        )

    __rmul__ = __mul__

    # -- evaluation and residuals -------------------------------------------

    def physical(self):
        """Sample both components on the (x_nodes, y_nodes) grid."""
        g = self.grid
        spec = np.zeros((g.n_x // 2 + 1, 2, g.n_q), complex)
        spec[: self.vals.shape[0]] = self.vals
        out = np.fft.irfft(spec * g.n_x, n=g.n_x, axis=0)
        return out[:, 0, :], out[:, 1, :]

    def physical_gradient(self):
        """Sample (d_x v1, d_y v1, d_x v2, d_y v2) on the quadrature grid."""
        g = self.grid
        nj = self.vals.shape[0]
        k = g.kx[:nj]
        dx_modes = 1j * k[:, None, None] * self.vals
        spec = np.zeros((g.n_x // 2 + 1, 4, g.n_q), complex)
        spec[:nj, 0] = dx_modes[:, 0]
        spec[:nj, 1] = self.dvals[:, 0]
        spec[:nj, 2] = dx_modes[:, 1]
        spec[:nj, 3] = self.dvals[:, 1]
        out = np.fft.irfft(spec * g.n_x, n=g.n_x, axis=0)
        return out[:, 0, :], out[:, 1, :], out[:, 2, :], out[:, 3, :]

    def divergence_residual(self) -> float:
        """Max abs of i*k*v1 + v2' over modes and quadrature nodes."""
        nj = self.vals.shape[0]
        k = self.grid.kx[:nj]
        res = 1j * k[:, None] * self.vals[:, 0, :] + self.dvals[:, 1, :]
        return float(np.abs(res).max())

    def normal_trace_coeffs(self) -> np.ndarray:
        """Coefficients of v.n per (mode, wall); bottom normal is (0,-1)."""
        out = np.empty((self.vals.shape[0], 2), complex)
        out[:, 0] = -self.wall_vals[:, 1, 0]
        out[:, 1] = self.wall_vals[:, 1, 1]
        return out

    def tangential_trace_coeffs(self) -> np.ndarray:
        """Coefficients of v.tau per (mode, wall); tau is (1,0) bottom, (-1,0) top."""
        out = np.empty((self.vals.shape[0], 2), complex)
        out[:, 0] = self.wall_vals[:, 0, 0]
        out[:, 1] = -self.wall_vals[:, 0, 1]
        return out

    def tangential_stress_coeffs(self, alpha: float) -> np.ndarray:
        """Coefficients of [2 D(v) n + alpha v] . tau per (mode, wall)."""
        nj = self.vals.shape[0]
        k = self.grid.kx[:nj]
        two_d12 = self.wall_dvals[:, 0, :] + 1j * k[:, None] * self.wall_vals[:, 1, :]
        out = np.empty((nj, 2), complex)
        out[:, 0] = -two_d12[:, 0] + alpha * self.wall_vals[:, 0, 0]
        out[:, 1] = -two_d12[:, 1] - alpha * self.wall_vals[:, 0, 1]
        return out

    def mean_value(self) -> np.ndarray:
        """Integral of the field over the channel (only the j = 0 row contributes)."""
        g = self.grid
        return g.spec.length_x * np.real(self.vals[0] @ g.w_y)


def _mode_weights(n_modes: int) -> np.ndarray:
    w = np.full(n_modes + 1, 2.0)
    w[0] = 1.0
    return w


def inner_h(u: ModeField, v: ModeField) -> float:
    """L2 inner product over the channel."""
    _check_same_grid(u, v)
    g = u.grid
    nj = min(u.vals.shape[0], v.vals.shape[0])
    s = np.einsum("jcq,jcq,q->j", u.vals[:nj], v.vals[:nj].conj(), g.w_y)
    return float(g.spec.length_x * (_mode_weights(nj - 1) @ s.real))


def inner_v(u: ModeField, v: ModeField, alpha: float | None = None) -> float:
    """Strain-plus-friction energy inner product 2(Du, Dv) + alpha int_Gamma u.v."""
    _check_same_grid(u, v)
    g = u.grid
    if alpha is None:
        alpha = g.spec.friction_alpha
    nj = min(u.vals.shape[0], v.vals.shape[0])
    k = g.kx[:nj][:, None]

    def strain(f):
        d11 = 1j * k * f.vals[:nj, 0]
        d12 = 0.5 * (f.dvals[:nj, 0] + 1j * k * f.vals[:nj, 1])
        d22 = f.dvals[:nj, 1]
        return d11, d12, d22

    a11, a12, a22 = strain(u)
    b11, b12, b22 = strain(v)
    body = np.einsum(
        "jq,q->j",
        a11 * b11.conj() + 2.0 * a12 * b12.conj() + a22 * b22.conj(),
        g.w_y,
    )
    wall = np.einsum("jcw,jcw->j", u.wall_vals[:nj], v.wall_vals[:nj].conj())
    total = 2.0 * body.real + alpha * wall.real
    return float(g.spec.length_x * (_mode_weights(nj - 1) @ total))


def grad_sq(u: ModeField) -> float:
    """Squared L2 norm of the full velocity gradient."""
    g = u.grid
    nj = u.vals.shape[0]
    k = g.kx[:nj][:, None]
    parts = (
        np.abs(1j * k * u.vals[:, 0]) ** 2
        + np.abs(u.dvals[:, 0]) ** 2
        + np.abs(1j * k * u.vals[:, 1]) ** 2
        + np.abs(u.dvals[:, 1]) ** 2
    )
    s = np.einsum("jq,q->j", parts, g.w_y)
    return float(g.spec.length_x * (_mode_weights(nj - 1) @ s))


def norm_h(u: ModeField) -> float:
    return float(np.sqrt(max(inner_h(u, u), 0.0)))


def norm_v(u: ModeField, alpha: float | None = None) -> float:
    return float(np.sqrt(max(inner_v(u, u, alpha), 0.0)))


def norm_h1(u: ModeField) -> float:
    return float(np.sqrt(max(inner_h(u, u) + grad_sq(u), 0.0)))


def korn_ratio(v: ModeField, alpha: float | None = None) -> float:
    """Ratio of the H1 norm to the energy norm; finite on the discrete space."""
    nv = norm_v(v, alpha)
    if nv == 0.0:
        raise BasisError("korn_ratio undefined for the zero field")
    return norm_h1(v) / nv


def lq_norm(u: ModeField, q: float) -> float:
    """Lq(domain) norm of |v| evaluated on the quadrature grid."""
    g = u.grid
    u1, u2 = u.physical()
    mag = (u1 * u1 + u2 * u2) ** (q / 2.0)
    return float((g.w_x * mag.sum(axis=0) @ g.w_y) ** (1.0 / q))


def wall_lq_norm(u: ModeField, q: float) -> float:
    """Lq(boundary) norm of |v| from the wall trace coefficients."""
    g = u.grid
    nj = u.vals.shape[0]
    x = g.x_nodes
    total = 0.0
    for w in (0, 1):
        tr = np.zeros((2, g.n_x))
        for c in (0, 1):
            coeff = u.wall_vals[:, c, w]
            phases = np.exp(1j * np.outer(g.kx[:nj], x))
            vals = coeff[0].real + 2.0 * (coeff[1:, None] * phases[1:]).real.sum(axis=0)
            tr[c] = vals
        total += g.w_x * (np.hypot(tr[0], tr[1]) ** q).sum()
    return float(total ** (1.0 / q))


# -- eigenbasis -------------------------------------------------------------


@dataclass(eq=False)
class Basis:
    """H-orthonormal eigenbasis of the energy form, sorted by eigenvalue."""

    grid: Grid
    eigenvalues: np.ndarray       # (n,) positive, nondecreasing
    mode_j: np.ndarray            # (n,) wavenumber index of each entry
    family: np.ndarray            # (n,) FAMILY_SHEAR / FAMILY_COS / FAMILY_SIN
    shell_index: np.ndarray       # (n,) index within the per-mode spectrum
    profiles_cgl: np.ndarray      # (n, n_y) generating profile (u or psi) on CGL
    fields: list                  # n single-mode ModeFields
    stack_vals: np.ndarray        # (n, K+1, 2, n_q) for fast linear combinations
    stack_dvals: np.ndarray
    stack_wall: np.ndarray
    stack_wall_d: np.ndarray
    tau_trace: np.ndarray         # (n, 2) coefficients of e_i . tau on each wall

    @property
    def size(self) -> int:
        return self.eigenvalues.size

    def field(self, coeffs) -> ModeField:
        """Velocity field with the given basis coefficients."""
        return ModeField.combine(
            np.asarray(coeffs, float),
            self.stack_vals,
            self.stack_dvals,
            self.stack_wall,
            self.stack_wall_d,
            self.grid,
        )


def _zero_mean_nullspace(grid: Grid) -> np.ndarray:
    c = (grid.w_y @ grid.interp).reshape(1, -1)
    return scipy.linalg.null_space(c)


def shear_pencil(grid: Grid, alpha: float):
    """Energy/mass matrices for x-independent shear profiles on nodal values."""
    lx = grid.spec.length_x
    p, pd = grid.interp, grid.interp_d1
    w = grid.w_y
    mass = lx * (p.T * w) @ p
    stiff = (pd.T * w) @ pd
    wall = np.zeros_like(stiff)
    wall[0, 0] = 1.0
    wall[-1, -1] = 1.0
    energy = lx * (stiff + alpha * wall)
    return energy, mass


def mode_pencil(grid: Grid, j: int, alpha: float):
    """Energy/mass matrices for mode-j streamfunction profiles on nodal values."""
    lx = grid.spec.length_x
    k = grid.kx[j]
    p, pd, pdd = grid.interp, grid.interp_d1, grid.interp_d2
    w = grid.w_y
    curl = pdd + k * k * p
    energy = lx * (
        2.0 * k * k * (pd.T * w) @ pd
        + 0.5 * (curl.T * w) @ curl
        + 0.5 * alpha * (np.outer(grid.d1[0], grid.d1[0]) + np.outer(grid.d1[-1], grid.d1[-1]))
    )
    mass = 0.5 * lx * ((pd.T * w) @ pd + k * k * (p.T * w) @ p)
    return energy, mass


def _canonical_sign(vec: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(vec)))
    return -vec if vec[i] < 0 else vec


def _solve_pencil(energy, mass, reduce_cols):
    a = reduce_cols.T @ energy @ reduce_cols
    m = reduce_cols.T @ mass @ reduce_cols
    lam, vecs = scipy.linalg.eigh(a, m)
    full = reduce_cols @ vecs
    return lam, np.apply_along_axis(_canonical_sign, 0, full)


def build_eigenbasis(spec: DomainSpec, n: int, grid: Grid | None = None) -> Basis:
    """Eigenbasis of the energy form over divergence-free zero-normal-trace fields.

    Per wavenumber the problem reduces to a symmetric-definite pencil: shear
    profiles with a zero-mean constraint at j = 0, clamped streamfunctions
    for j >= 1 (each eigenvalue carries a cos and a sin realization).  The
    merged spectrum is sorted by eigenvalue with deterministic tie-breaking
    by (wavenumber, shell index, family).
    """
    if grid is None:
        grid = build_grid(spec)
    alpha = spec.friction_alpha
    n_y = grid.n_y
    capacity = (n_y - 1) + 2 * spec.modes_x * (n_y - 2)
    if n < 1 or n > capacity:
        raise BasisError(f"requested {n} eigenpairs, capacity is {capacity}")

    lams, js, fams, shells, profiles = [], [], [], [], []

    z = _zero_mean_nullspace(grid)
    lam0, u0 = _solve_pencil(*shear_pencil(grid, alpha), z)
    for m in range(lam0.size):
        lams.append(lam0[m])
        js.append(0)
        fams.append(FAMILY_SHEAR)
        shells.append(m)
        profiles.append(u0[:, m])

    interior = np.zeros((n_y, n_y - 2))
    interior[1:-1] = np.eye(n_y - 2)
    for j in range(1, spec.modes_x + 1):
        lamj, phij = _solve_pencil(*mode_pencil(grid, j, alpha), interior)
        for m in range(lamj.size):
            for fam in (FAMILY_COS, FAMILY_SIN):
                lams.append(lamj[m])
                js.append(j)
                fams.append(fam)
                shells.append(m)
                profiles.append(phij[:, m])

    lams = np.asarray(lams)
    order = np.argsort(lams, kind="stable")[:n]
    lam = lams[order]
    if lam[0] <= 0:
        raise BasisError("nonpositive eigenvalue: resolution too low")

    fields = []
    tau = np.zeros((n, 2), complex)
    for idx in order:
        if fams[idx] == FAMILY_SHEAR:
            f = ModeField.from_shear_profile(grid, profiles[idx])
        else:
            fam = "cos" if fams[idx] == FAMILY_COS else "sin"
            f = ModeField.from_streamfunction(grid, js[idx], profiles[idx], fam)
        fields.append(f)
    for i, f in enumerate(fields):
        tau[i] = f.tangential_trace_coeffs()[js[order[i]]]

    basis = Basis(
        grid=grid,
        eigenvalues=lam,
        mode_j=np.asarray(js)[order],
        family=np.asarray(fams)[order],
        shell_index=np.asarray(shells)[order],
        profiles_cgl=np.asarray([profiles[i] for i in order]),
        fields=fields,
        stack_vals=np.stack([f.vals for f in fields]),
        stack_dvals=np.stack([f.dvals for f in fields]),
        stack_wall=np.stack([f.wall_vals for f in fields]),
        stack_wall_d=np.stack([f.wall_dvals for f in fields]),
        tau_trace=tau,
    )
    _self_check(basis)
    return basis


def _self_check(basis: Basis, n_tests: int = 3, tol: float = 1e-6):
    rng = np.random.default_rng(0)
    n = basis.size
    for _ in range(n_tests):
        v = basis.field(rng.standard_normal(n))
        for i in rng.integers(0, n, size=4):
            lhs = inner_v(v, basis.fields[i])
            rhs = basis.eigenvalues[i] * inner_h(v, basis.fields[i])
            if abs(lhs - rhs) > tol * basis.eigenvalues[i] * max(1.0, norm_h(v)):
                raise BasisError("weak eigen-residual check failed")


def truncate_basis(basis: Basis, n: int) -> Basis:
    """First n entries of a basis; nested because the spectrum sort is stable."""
    if n > basis.size:
        raise BasisError(f"cannot truncate size-{basis.size} basis to {n}")
    return Basis(
        grid=basis.grid,
        eigenvalues=basis.eigenvalues[:n],
        mode_j=basis.mode_j[:n],
        family=basis.family[:n],
        shell_index=basis.shell_index[:n],
        profiles_cgl=basis.profiles_cgl[:n],
        fields=basis.fields[:n],
        stack_vals=basis.stack_vals[:n],
        stack_dvals=basis.stack_dvals[:n],
        stack_wall=basis.stack_wall[:n],
        stack_wall_d=basis.stack_wall_d[:n],
        tau_trace=basis.tau_trace[:n],
    )


def project(field: ModeField, basis: Basis) -> np.ndarray:
    """L2 coefficients of the field against the basis entries."""
    g = basis.grid
    nj = min(field.vals.shape[0], basis.stack_vals.shape[1])
    s = np.einsum(
        "jcq,njcq,q->nj",
        field.vals[:nj],
        basis.stack_vals[:, :nj].conj(),
        g.w_y,
    )
    return g.spec.length_x * (s.real @ _mode_weights(nj - 1))


# -- persistence -------------------------------------------------------------


def save_basis(path, basis: Basis, meta: dict | None = None):
    payload = {
        "eigenvalues": basis.eigenvalues,
        "mode_j": basis.mode_j,
        "family": basis.family,
        "shell_index": basis.shell_index,
        "profiles_cgl": basis.profiles_cgl,
        "spec": np.array(
            [
                basis.grid.spec.length_x,
                basis.grid.spec.modes_x,
                basis.grid.spec.nodes_y,
                basis.grid.spec.friction_alpha,
                basis.grid.spec.viscosity,
            ]
        ),
    }
    if meta:
        for key, val in meta.items():
            payload[f"meta_{key}"] = np.array(val)
    if hasattr(path, "write"):
        np.savez(path, **payload)
    else:
        with open(path, "wb") as fh:
            np.savez(fh, **payload)


def load_basis(path) -> Basis:
    with np.load(path) as data:
        sp = data["spec"]
        spec = DomainSpec(
            length_x=float(sp[0]),
            modes_x=int(sp[1]),
            nodes_y=int(sp[2]),
            friction_alpha=float(sp[3]),
            viscosity=float(sp[4]),
        )
        grid = build_grid(spec)
        lam = data["eigenvalues"]
        js = data["mode_j"]
        fams = data["family"]
        shells = data["shell_index"]
        profs = data["profiles_cgl"]
    fields = []
    tau = np.zeros((lam.size, 2), complex)
    for i in range(lam.size):
        if fams[i] == FAMILY_SHEAR:
            f = ModeField.from_shear_profile(grid, profs[i])
        else:
            fam = "cos" if fams[i] == FAMILY_COS else "sin"
            f = ModeField.from_streamfunction(grid, int(js[i]), profs[i], fam)
        fields.append(f)
        tau[i] = f.tangential_trace_coeffs()[int(js[i])]
    return Basis(
        grid=grid,
        eigenvalues=lam,
        mode_j=js,
        family=fams,
        shell_index=shells,
        profiles_cgl=profs,
        fields=fields,
        stack_vals=np.stack([f.vals for f in fields]),
        stack_dvals=np.stack([f.dvals for f in fields]),
        stack_wall=np.stack([f.wall_vals for f in fields]),
        stack_wall_d=np.stack([f.wall_dvals for f in fields]),
        tau_trace=tau,
    )


def serialize_basis_bytes(basis: Basis, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    save_basis(buf, basis, meta)
    return buf.getvalue()
