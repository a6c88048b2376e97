"""Time-stepping kernels: numba-jitted hot loop with a pure-numpy twin.

The backend is chosen once at import from the SLIPFLOW_BACKEND environment
variable ("numba" or "numpy"; default numba when importable) and can be
overridden programmatically with set_backend, which the benchmark uses to
compare both on identical inputs.

Both kernels integrate the same explicit scheme

    beta <- beta + drift(beta, t) dt + G(beta) dW

where the drift is assembled from precomputed dense operator tensors
(eigenvalue damping, lifting couplings, quadratic convection forms) and the
diffusion columns are additive vectors plus a diagonal multiplicative gain.
Diagnostics (squared mass/energy norms, tracking error against a target,
squared noise magnitude) are recorded at every time point.  A path aborts
when the state stops being finite or its squared norm passes blowup_limit;
the abort step is returned and later entries stay NaN.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

__all__ = ["active_backend", "set_backend", "em_loop", "HAVE_NUMBA"]


def _em_loop_numpy(
    beta0, lam, nu, dt,
    conv_bb, conv_bc, conv_cc,
    lift_v, btrace, lift_h, gram_h,
    gamma, gamma_dot, beta_ref, gamma_ref,
    add_mat, rho, dw,
    store_beta, blowup_limit,
):
    n_steps = dw.shape[0]
    n = beta0.shape[0]
    u_sq = np.full(n_steps + 1, np.nan)
    u_esq = np.full(n_steps + 1, np.nan)
    tracking = np.full(n_steps + 1, np.nan)
    noise_sq = np.full(n_steps + 1, np.nan)
    beta_hist = np.zeros((n_steps + 1 if store_beta else 1, n))
    beta = beta0.copy()
    conv_flat = conv_bb.reshape(n, -1)
    blowup_step = -1
    for ell in range(n_steps + 1):
        u_sq[ell] = beta @ beta
        u_esq[ell] = lam @ (beta * beta)
        bd = beta - beta_ref[ell]
        gd = gamma[ell] - gamma_ref[ell]
        tracking[ell] = bd @ bd + 2.0 * (bd @ (lift_h @ gd)) + gd @ (gram_h @ gd)
        gmat = add_mat + beta[:, None] * rho[None, :]
        noise_sq[ell] = float(np.sum(gmat * gmat))
        if store_beta:
            beta_hist[ell] = beta
        if ell == n_steps:
            break
        g = gamma[ell]
        drift = (
            -nu * lam * beta
            - nu * (lift_v @ g)
            + nu * (btrace @ g)
            - lift_h @ gamma_dot[ell]
        )
        nl = (
            conv_flat @ np.outer(beta, beta).ravel()
            + (conv_bc @ g) @ beta
            + (conv_cc @ g) @ g
        )
        beta = beta + dt * (drift - nl) + gmat @ dw[ell]
        nrm = beta @ beta
        if not np.isfinite(nrm) or nrm > blowup_limit:
            blowup_step = ell + 1
            break
    return beta_hist, beta, u_sq, u_esq, tracking, noise_sq, blowup_step


def _em_loop_loops(
    beta0, lam, nu, dt,
    conv_bb, conv_bc, conv_cc,
    lift_v, btrace, lift_h, gram_h,
    gamma, gamma_dot, beta_ref, gamma_ref,
    add_mat, rho, dw,
    store_beta, blowup_limit,
):
    n_steps = dw.shape[0]
    n = beta0.shape[0]
    nc = gamma.shape[1]
    m = rho.shape[0]
    u_sq = np.full(n_steps + 1, np.nan)
    u_esq = np.full(n_steps + 1, np.nan)
    tracking = np.full(n_steps + 1, np.nan)
    noise_sq = np.full(n_steps + 1, np.nan)
    if store_beta:
        beta_hist = np.zeros((n_steps + 1, n))
    else:
        beta_hist = np.zeros((1, n))
    beta = beta0.copy()
    drift = np.zeros(n)
    blowup_step = -1
    for ell in range(n_steps + 1):
        s2 = 0.0
        se = 0.0
        for i in range(n):
            s2 += beta[i] * beta[i]
            se += lam[i] * beta[i] * beta[i]
        u_sq[ell] = s2
        u_esq[ell] = se
        tr = 0.0
        for i in range(n):
            bd = beta[i] - beta_ref[ell, i]
            acc = 0.0
            for c in range(nc):
                acc += lift_h[i, c] * (gamma[ell, c] - gamma_ref[ell, c])
            tr += bd * bd + 2.0 * bd * acc
        for c in range(nc):
            gc = gamma[ell, c] - gamma_ref[ell, c]
            acc = 0.0
            for c2 in range(nc):
                acc += gram_h[c, c2] * (gamma[ell, c2] - gamma_ref[ell, c2])
            tr += gc * acc
        tracking[ell] = tr
        ns = 0.0
        for k in range(m):
            for i in range(n):
                gik = add_mat[i, k] + rho[k] * beta[i]
                ns += gik * gik
        noise_sq[ell] = ns
        if store_beta:
            for i in range(n):
                beta_hist[ell, i] = beta[i]
        if ell == n_steps:
            break
        for i in range(n):
            acc = -nu * lam[i] * beta[i]
            for c in range(nc):
                acc += (
                    -nu * lift_v[i, c] + nu * btrace[i, c]
                ) * gamma[ell, c] - lift_h[i, c] * gamma_dot[ell, c]
            nl = 0.0
            for p in range(n):
                accq = 0.0
                for q in range(n):
                    accq += conv_bb[i, p, q] * beta[q]
                for c in range(nc):
                    accq += conv_bc[i, p, c] * gamma[ell, c]
                nl += beta[p] * accq
            for c in range(nc):
                accc = 0.0
                for c2 in range(nc):
                    accc += conv_cc[i, c, c2] * gamma[ell, c2]
                nl += gamma[ell, c] * accc
            drift[i] = acc - nl
        cmult = 0.0
        for k in range(m):
            cmult += rho[k] * dw[ell, k]
        nrm = 0.0
        for i in range(n):
            bi = beta[i] + dt * drift[i] + cmult * beta[i]
            for k in range(m):
                bi += add_mat[i, k] * dw[ell, k]
            beta[i] = bi
            nrm += bi * bi
        if not np.isfinite(nrm) or nrm > blowup_limit:
            blowup_step = ell + 1
            break
    return beta_hist, beta, u_sq, u_esq, tracking, noise_sq, blowup_step


_env = os.environ.get("SLIPFLOW_BACKEND", "").strip().lower()
HAVE_NUMBA = False
_em_loop_numba = None
if _env != "numpy":
    try:
        import numba

        _em_loop_numba = numba.njit(cache=True, nogil=True)(_em_loop_loops)
        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover
        if _env == "numba":
            raise
        warnings.warn("numba unavailable, falling back to the numpy kernel")

_active = "numba" if HAVE_NUMBA and _env != "numpy" else "numpy"


def active_backend() -> str:
    return _active


def set_backend(name: str):
    """Select the stepping kernel ('numba' or 'numpy')."""
    global _active
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _active = name


def em_loop(*args):
    if _active == "numba":
        return _em_loop_numba(*args)
    return _em_loop_numpy(*args)
