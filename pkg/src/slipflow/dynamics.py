"""Galerkin SDE for the channel flow driven by slip-wall boundary data.

The state is the coefficient vector beta of the homogeneous part u against
the eigenbasis; the physical velocity is y = u + a_lift with a_lift the
lifted boundary data.  Testing the momentum balance against each basis field
e_i gives the coefficient dynamics

    d beta_i = [ -nu * lam_i * beta_i - nu (a_lift, e_i)_E
                 + nu int_Gamma b (e_i . tau)
                 - (dt a_lift, e_i) - ((y . grad) y, e_i) ] dt
               + sum_k (G_k(y), e_i) dW_k,

with the noise family G_k = g_k + rho_k * u (additive plus diagonal
multiplicative).  All couplings are precomputed as dense tensors once per
(basis, lifting cache), so a time step is a handful of small contractions;
the hot loop lives in ._kernels with numba and numpy backends.

Convection projections are evaluated pseudospectrally on a physical grid
wide enough that quadratic products are integrated exactly (no aliasing
reaches the resolved band).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .basis import Basis, ModeField, inner_h, inner_v
from .geometry import Grid
from .lifting import BoundaryControl, LiftingCache

__all__ = [
    "DynamicsError",
    "BlowupError",
    "NoiseModel",
    "GalerkinState",
    "Trajectory",
    "GalerkinOperators",
    "assemble_operators",
    "nonlinear_term",
    "drift",
    "diffusion",
    "step_em",
    "Simulator",
    "make_initial_coeffs",
    "build_noise",
]


class DynamicsError(RuntimeError):
    """Simulation setup or stepping failure."""


class BlowupError(DynamicsError):
    """State left the finite range during stepping."""


@dataclass(eq=False)
class NoiseModel:
    """Wiener forcing: m channels, each g_k + rho_k * u in basis coordinates."""

    additive: np.ndarray   # (n, m) columns g_k
    mult_gain: np.ndarray  # (m,) nonnegative gains rho_k

    def __post_init__(self):
        self.additive = np.asarray(self.additive, float)
        self.mult_gain = np.asarray(self.mult_gain, float)
        if self.additive.ndim != 2 or self.additive.shape[1] != self.mult_gain.size:
            raise DynamicsError("additive matrix must be (n, m) matching mult_gain")
        if (self.mult_gain < 0).any():
            raise DynamicsError("multiplicative gains must be nonnegative")

    @property
    def m(self) -> int:
        return self.mult_gain.size

    @property
    def lipschitz_k(self) -> float:
        """Exact squared-increment constant: |G(v)-G(z)|_F^2 = K |v-z|^2."""
        return float(np.sum(self.mult_gain**2))

    @property
    def growth_k(self) -> float:
        """Linear-growth constant for the summed channel norms."""
        g_sum = float(np.linalg.norm(self.additive, axis=0).sum())
        return max(g_sum, float(self.mult_gain.sum()))

    def matrix(self, beta: np.ndarray) -> np.ndarray:
        return self.additive + np.outer(beta, self.mult_gain)


def build_noise(n: int, m: int, additive_scale: float, additive_decay: float,
                seed: int, mult_gain) -> NoiseModel:
    """Seeded additive coefficient vectors with power-law decay across the basis."""
    rng = np.random.default_rng(np.random.SeedSequence([0x6E01, seed]))
    decay = (1.0 + np.arange(n)) ** (-additive_decay)
    g = additive_scale * rng.standard_normal((n, m)) * decay[:, None]
    rho = np.broadcast_to(np.asarray(mult_gain, float), (m,)).copy()
    return NoiseModel(additive=g, mult_gain=rho)


@dataclass
class GalerkinState:
    t: float
    beta: np.ndarray


@dataclass(eq=False)
class Trajectory:
    """One simulated path with its per-step diagnostics.

    Series are indexed by the time grid; `u_sq` and `u_esq` are the squared
    mass and energy norms of the homogeneous part, `tracking` the squared
    L2 distance of y to the target at each time, `noise_sq` the squared
    Frobenius magnitude of the diffusion.  Same seed and configuration
    reproduce every array bitwise.
    """

    times: np.ndarray
    seed: int
    beta0: np.ndarray
    beta_final: np.ndarray
    u_sq: np.ndarray
    u_esq: np.ndarray
    tracking: np.ndarray
    noise_sq: np.ndarray
    blown_up: bool
    blowup_step: int
    beta_series: np.ndarray | None = None
    wiener: np.ndarray | None = None

    def export_csv(self, path, n_beta: int = 4, meta: str = ""):
        cols = min(n_beta, self.beta_final.size)
        with open(path, "w") as fh:
            if meta:
                fh.write(f"# {meta}\n")
            names = ",".join(f"beta_{i}" for i in range(cols))
            fh.write(f"time,u_l2,u_energy,tracking,noise_frob{',' + names if cols else ''}\n")
            for ell, t in enumerate(self.times):
                row = [
                    t,
                    np.sqrt(self.u_sq[ell]) if np.isfinite(self.u_sq[ell]) else np.nan,
                    np.sqrt(self.u_esq[ell]) if np.isfinite(self.u_esq[ell]) else np.nan,
                    self.tracking[ell],
                    np.sqrt(self.noise_sq[ell]) if np.isfinite(self.noise_sq[ell]) else np.nan,
                ]
                if cols and self.beta_series is not None:
                    row.extend(self.beta_series[ell, :cols])
                elif cols:
                    row.extend([np.nan] * cols)
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

    def export_npz(self, path):
        payload = {
            "times": self.times,
            "seed": np.array(self.seed),
            "beta0": self.beta0,
            "beta_final": self.beta_final,
            "u_sq": self.u_sq,
            "u_esq": self.u_esq,
            "tracking": self.tracking,
            "noise_sq": self.noise_sq,
            "blown_up": np.array(self.blown_up),
            "blowup_step": np.array(self.blowup_step),
        }
        if self.beta_series is not None:
            payload["beta_series"] = self.beta_series
        np.savez(path, **payload)


# -- convection projections ---------------------------------------------------


def _weighted_basis_samples(basis: Basis):
    g = basis.grid
    e1 = np.empty((basis.size, g.n_x, g.n_q))
    e2 = np.empty_like(e1)
    for i, f in enumerate(basis.fields):
        e1[i], e2[i] = f.physical()
    w2d = g.quad_weights_domain
    return e1, e2, e1 * w2d, e2 * w2d


def nonlinear_term(y: ModeField, basis: Basis) -> np.ndarray:
    """Coefficients ((y . grad) y, e_i) by pseudospectral quadrature.

    Exact for fields within the resolved band; the physical grid is wide
    enough that the quadratic product cannot alias back onto it.
    """
    g = basis.grid
    if y.n_modes > g.spec.modes_x:
        raise DynamicsError("field exceeds the dealiased band of the grid")
    u1, u2 = y.physical()
    gx1, gy1, gx2, gy2 = y.physical_gradient()
    w1 = u1 * gx1 + u2 * gy1
    w2 = u1 * gx2 + u2 * gy2
    w2d = g.quad_weights_domain
    out = np.empty(basis.size)
    for i, f in enumerate(basis.fields):
        e1, e2 = f.physical()
        out[i] = float(np.sum(w1 * e1 * w2d) + np.sum(w2 * e2 * w2d))
    return out


@dataclass(eq=False)
class GalerkinOperators:
    """Dense couplings of the basis and the lifting cache.

    conv_bb[i, p, q] = ((e_p . grad) e_q, e_i)
    conv_bc[i, p, c] = ((e_p . grad) A_c + (A_c . grad) e_p, e_i)
    conv_cc[i, c, d] = ((A_c . grad) A_d, e_i)
    lift_h / lift_v  = (A_c, e_i) in the mass / energy pairing
    btrace[i, c]     = int_Gamma b_c (e_i . tau)
    gram_h / gram_v  = pairings of the unit lifted fields
    wall_quad[c,i,p] = int_Gamma a_c (e_i . tau)(e_p . tau)
    """

    lam: np.ndarray
    conv_bb: np.ndarray
    conv_bc: np.ndarray
    conv_cc: np.ndarray
    lift_h: np.ndarray
    lift_v: np.ndarray
    btrace: np.ndarray
    gram_h: np.ndarray
    gram_v: np.ndarray
    wall_quad: np.ndarray

    @property
    def n(self) -> int:
        return self.lam.size

    @property
    def n_ctrl(self) -> int:
        return self.lift_h.shape[1]


def assemble_operators(basis: Basis, cache: LiftingCache | None) -> GalerkinOperators:
    g = basis.grid
    n = basis.size
    lx = g.spec.length_x
    e1, e2, we1, we2 = _weighted_basis_samples(basis)

    grads = []
    for f in basis.fields:
        grads.append(f.physical_gradient())
    gx1 = np.stack([gr[0] for gr in grads])
    gy1 = np.stack([gr[1] for gr in grads])
    gx2 = np.stack([gr[2] for gr in grads])
    gy2 = np.stack([gr[3] for gr in grads])

    conv_bb = np.empty((n, n, n))
    for p in range(n):
        w1 = e1[p][None] * gx1 + e2[p][None] * gy1
        w2 = e1[p][None] * gx2 + e2[p][None] * gy2
        conv_bb[:, p, :] = np.einsum("ixy,qxy->iq", we1, w1) + np.einsum(
            "ixy,qxy->iq", we2, w2
        )

    if cache is None:
        nc = 1
        conv_bc = np.zeros((n, n, nc))
        conv_cc = np.zeros((n, nc, nc))
        lift_h = np.zeros((n, nc))
        lift_v = np.zeros((n, nc))
        btrace = np.zeros((n, nc))
        gram_h = np.zeros((nc, nc))
        gram_v = np.zeros((nc, nc))
        wall_quad = np.zeros((nc, n, n))
    else:
        nc = cache.n_dofs
        a1 = np.empty((nc, g.n_x, g.n_q))
        a2 = np.empty_like(a1)
        agx1 = np.empty_like(a1)
        agy1 = np.empty_like(a1)
        agx2 = np.empty_like(a1)
        agy2 = np.empty_like(a1)
        for c, f in enumerate(cache.fields):
            a1[c], a2[c] = f.physical()
            agx1[c], agy1[c], agx2[c], agy2[c] = f.physical_gradient()

        conv_bc = np.empty((n, n, nc))
        for p in range(n):
            w1 = e1[p][None] * agx1 + e2[p][None] * agy1
            w1 += a1 * gx1[p][None] + a2 * gy1[p][None]
            w2 = e1[p][None] * agx2 + e2[p][None] * agy2
            w2 += a1 * gx2[p][None] + a2 * gy2[p][None]
            conv_bc[:, p, :] = np.einsum("ixy,cxy->ic", we1, w1) + np.einsum(
                "ixy,cxy->ic", we2, w2
            )
        conv_cc = np.empty((n, nc, nc))
        for c in range(nc):
            w1 = a1[c][None] * agx1 + a2[c][None] * agy1
            w2 = a1[c][None] * agx2 + a2[c][None] * agy2
            conv_cc[:, c, :] = np.einsum("ixy,dxy->id", we1, w1) + np.einsum(
                "ixy,dxy->id", we2, w2
            )

        lift_h = np.empty((n, nc))
        lift_v = np.empty((n, nc))
        for c, f in enumerate(cache.fields):
            for i, e in enumerate(basis.fields):
                lift_h[i, c] = inner_h(f, e)
                lift_v[i, c] = inner_v(f, e, cache.alpha)
        gram_h = np.empty((nc, nc))
        gram_v = np.empty((nc, nc))
        for c in range(nc):
            for d in range(c, nc):
                gram_h[c, d] = gram_h[d, c] = inner_h(cache.fields[c], cache.fields[d])
                gram_v[c, d] = gram_v[d, c] = inner_v(
                    cache.fields[c], cache.fields[d], cache.alpha
                )

        # wall pairings on the physical x grid (exact: trace products stay
        # below the quadrature band)
        nm = cache.n_modes
        phases = np.exp(1j * np.outer(g.kx, g.x_nodes))  # (K+1, n_x)

        def trace_values(mode_coeffs):
            vals = mode_coeffs[0].real + 2.0 * (
                mode_coeffs[1:, None] * phases[1 : mode_coeffs.size]
            ).real.sum(axis=0)
            return vals

        tr = np.zeros((n, 2, g.n_x))
        for i in range(n):
            ji = int(basis.mode_j[i])
            for wall in (0, 1):
                cvec = np.zeros(ji + 1, complex)
                cvec[ji] = basis.tau_trace[i, wall]
                tr[i, wall] = trace_values(cvec)

        btrace = np.zeros((n, nc))
        wall_quad = np.zeros((nc, n, n))
        for c in range(nc):
            unit = BoundaryControl.zeros(lx, cache.n_modes, [0.0], cache.p)
            unit.gamma[0, c] = 1.0
            table = unit.coeffs(unit.gamma[0])  # (4, nm+1): a_b, a_t, b_b, b_t
            a_vals = np.stack([trace_values(table[0]), trace_values(table[1])])
            b_vals = np.stack([trace_values(table[2]), trace_values(table[3])])
            btrace[:, c] = g.w_x * np.einsum("wx,iwx->i", b_vals, tr)
            if np.abs(table[:2]).max() > 0:
                wall_quad[c] = g.w_x * np.einsum("wx,iwx,pwx->ip", a_vals, tr, tr)

    return GalerkinOperators(
        lam=basis.eigenvalues.copy(),
        conv_bb=conv_bb,
        conv_bc=conv_bc,
        conv_cc=conv_cc,
        lift_h=lift_h,
        lift_v=lift_v,
        btrace=btrace,
        gram_h=gram_h,
        gram_v=gram_v,
        wall_quad=wall_quad,
    )


# -- single-step reference operations ----------------------------------------


def drift(beta: np.ndarray, ops: GalerkinOperators, nu: float,
          gamma: np.ndarray, gamma_dot: np.ndarray,
          include_nonlinear: bool = True) -> np.ndarray:
    """Reference drift assembly (numpy, mirrors the kernel contraction)."""
    f = (
        -nu * ops.lam * beta
        - nu * (ops.lift_v @ gamma)
        + nu * (ops.btrace @ gamma)
        - ops.lift_h @ gamma_dot
    )
    if include_nonlinear:
        n = ops.n
        nl = (
            ops.conv_bb.reshape(n, -1) @ np.outer(beta, beta).ravel()
            + (ops.conv_bc @ gamma) @ beta
            + (ops.conv_cc @ gamma) @ gamma
        )
        f = f - nl
    return f


def diffusion(beta: np.ndarray, noise: NoiseModel) -> np.ndarray:
    """Diffusion matrix: column k holds the coefficients of g_k + rho_k u."""
    return noise.matrix(beta)


def step_em(state: GalerkinState, dt: float, dw: np.ndarray,
            ops: GalerkinOperators, noise: NoiseModel, nu: float,
            gamma: np.ndarray | None = None, gamma_dot: np.ndarray | None = None,
            include_nonlinear: bool = True) -> GalerkinState:
    """One explicit step; raises BlowupError on a nonfinite update."""
    if dt <= 0:
        raise DynamicsError("dt must be positive")
    nc = ops.n_ctrl
    g = np.zeros(nc) if gamma is None else gamma
    gd = np.zeros(nc) if gamma_dot is None else gamma_dot
    f = drift(state.beta, ops, nu, g, gd, include_nonlinear)
    beta = state.beta + dt * f + diffusion(state.beta, noise) @ dw
    if not np.all(np.isfinite(beta)):
        raise BlowupError(f"state became nonfinite at t = {state.t + dt}")
    return GalerkinState(t=state.t + dt, beta=beta)


# -- path simulation ----------------------------------------------------------


def make_initial_coeffs(n: int, kind: str = "zero", seed: int = 0,
                        scale: float = 1.0, decay: float = 1.0) -> np.ndarray:
    if kind == "zero":
        return np.zeros(n)
    if kind == "random":
        rng = np.random.default_rng(np.random.SeedSequence([0x0111, seed]))
        return scale * rng.standard_normal(n) * (1.0 + np.arange(n)) ** (-decay)
    raise DynamicsError(f"unknown initial kind {kind!r}")


def wiener_increments(seed: int, n_steps: int, m: int, dt: float) -> np.ndarray:
    """Counter-based increments, independent across seeds, N(0, dt I_m) rows."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    return np.sqrt(dt) * rng.standard_normal((n_steps, m))


class Simulator:
    """Bundles the assembled operators with a time grid and noise model."""

    def __init__(self, basis: Basis, cache: LiftingCache | None, noise: NoiseModel,
                 t_final: float, dt: float, include_nonlinear: bool = True,
                 blowup_limit: float = 1e12, ops: GalerkinOperators | None = None):
        if dt <= 0 or t_final <= 0:
            raise DynamicsError("dt and t_final must be positive")
        n_steps = int(round(t_final / dt))
        if abs(n_steps * dt - t_final) > 1e-9 * t_final or n_steps < 1:
            raise DynamicsError("t_final must be an integer multiple of dt")
        self.basis = basis
        self.grid: Grid = basis.grid
        self.cache = cache
        self.noise = noise
        if noise.additive.shape[0] != basis.size:
            raise DynamicsError("noise model dimension does not match the basis")
        self.nu = basis.grid.spec.viscosity
        self.t_final = t_final
        self.dt = dt
        self.n_steps = n_steps
        self.times = dt * np.arange(n_steps + 1)
        self.include_nonlinear = include_nonlinear
        self.blowup_limit = blowup_limit
        self.ops = assemble_operators(basis, cache) if ops is None else ops

    # -- control plumbing --------------------------------------------------

    def gamma_series(self, ctrl: BoundaryControl | None):
        nc = self.ops.n_ctrl
        if ctrl is None:
            z = np.zeros((self.n_steps + 1, nc))
            return z, z.copy()
        if self.cache is None or ctrl.n_modes != self.cache.n_modes:
            raise DynamicsError("control does not match the lifting cache")
        if ctrl.t_grid[-1] < self.t_final - 1e-9:
            raise DynamicsError("control horizon shorter than the simulation")
        gamma = np.empty((self.n_steps + 1, nc))
        gdot = np.empty_like(gamma)
        for ell, t in enumerate(self.times):
            gamma[ell], gdot[ell] = ctrl.interp(float(t))
        return gamma, gdot

    def _tensors(self):
        if self.include_nonlinear:
            return self.ops.conv_bb, self.ops.conv_bc, self.ops.conv_cc
        n, nc = self.ops.n, self.ops.n_ctrl
        return (
            np.zeros((n, n, n)),
            np.zeros((n, n, nc)),
            np.zeros((n, nc, nc)),
        )

    def run(self, seed: int = 0, ctrl: BoundaryControl | None = None,
            u0: np.ndarray | None = None, noise_on: bool = True,
            store_beta: bool = False, target=None,
            dw: np.ndarray | None = None, keep_wiener: bool = False,
            gamma_pair=None) -> Trajectory:
        n = self.ops.n
        beta0 = np.zeros(n) if u0 is None else np.asarray(u0, float).copy()
        if beta0.shape != (n,):
            raise DynamicsError("initial coefficients do not match the basis size")
        gamma, gdot = self.gamma_series(ctrl) if gamma_pair is None else gamma_pair
        if dw is None:
            dw = wiener_increments(seed, self.n_steps, self.noise.m, self.dt)
        if not noise_on:
            dw = np.zeros_like(dw)
        add = self.noise.additive if noise_on else np.zeros_like(self.noise.additive)
        rho = self.noise.mult_gain if noise_on else np.zeros_like(self.noise.mult_gain)

        if target is None:
            beta_ref = np.zeros((self.n_steps + 1, n))
            gamma_ref = np.zeros((self.n_steps + 1, self.ops.n_ctrl))
        else:
            beta_ref, gamma_ref = target.beta_series, target.gamma_series
            if beta_ref.shape != (self.n_steps + 1, n):
                raise DynamicsError("target does not match the simulation grid")

        cbb, cbc, ccc = self._tensors()
        hist, beta_final, u_sq, u_esq, tracking, noise_sq, blow = _kernels.em_loop(
            beta0, self.ops.lam, self.nu, self.dt,
            cbb, cbc, ccc,
            self.ops.lift_v, self.ops.btrace, self.ops.lift_h, self.ops.gram_h,
            gamma, gdot, beta_ref, gamma_ref,
            add, rho, dw,
            store_beta, self.blowup_limit,
        )
        return Trajectory(
            times=self.times.copy(),
            seed=seed,
            beta0=beta0,
            beta_final=beta_final,
            u_sq=u_sq,
            u_esq=u_esq,
            tracking=tracking,
            noise_sq=noise_sq,
            blown_up=blow >= 0,
            blowup_step=int(blow),
            beta_series=hist if store_beta else None,
            wiener=dw if keep_wiener else None,
        )

    def run_many(self, seeds, threads: int = 1, **kw) -> list:
        seeds = list(seeds)
        out = [None] * len(seeds)
        kw.setdefault("gamma_pair", self.gamma_series(kw.get("ctrl")))
        if threads <= 1:
            for idx, s in enumerate(seeds):
                out[idx] = self.run(seed=int(s), **kw)
            return out
        from concurrent.futures import ThreadPoolExecutor

        def work(idx_seed):
            idx, s = idx_seed
            out[idx] = self.run(seed=int(s), **kw)

        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, enumerate(seeds)))
        return out

    # -- field reconstruction ----------------------------------------------

    def state_field(self, beta: np.ndarray) -> ModeField:
        return self.basis.field(beta)

    def full_field(self, beta: np.ndarray, gamma_row: np.ndarray | None) -> ModeField:
        f = self.basis.field(beta)
        if gamma_row is not None and self.cache is not None:
            f = f + self.cache.field(gamma_row)
        return f
