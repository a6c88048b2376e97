"""Periodic-channel geometry: collocation grids, quadrature, wall bookkeeping.

The computational domain is the channel (0, L_x) x (0, 1), periodic in x and
bounded by two flat walls.  Fields are resolved by Fourier modes in x and by
polynomial collocation in y.  Integrals use equispaced (trapezoidal, exact on
the resolved trigonometric band) quadrature in x and Gauss-Legendre quadrature
in y, chosen fine enough that all bilinear and trilinear products of resolved
profiles are integrated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BOTTOM",
    "TOP",
    "WALLS",
    "GeometryError",
    "DomainSpec",
    "Grid",
    "build_grid",
    "integrate_domain",
    "integrate_boundary",
]

BOTTOM = "bottom"
TOP = "top"
WALLS = (BOTTOM, TOP)

MIN_NODES_Y = 8
MIN_MODES_X = 1


class GeometryError(ValueError):
    """Invalid domain specification or sample layout."""


@dataclass(frozen=True)
class DomainSpec:
    """Physical and resolution parameters of the periodic channel.

    length_x: channel period L_x.
    modes_x: number K of resolved Fourier wavenumbers (k_j = 2*pi*j/L_x, |j| <= K).
    nodes_y: wall-normal collocation nodes across y in [0, 1].
    friction_alpha: wall friction coefficient (>= 0).
    viscosity: kinematic viscosity (> 0).
    """

    length_x: float
    modes_x: int
    nodes_y: int
    friction_alpha: float = 0.0
    viscosity: float = 1.0

    def __post_init__(self):
        if not self.length_x > 0:
            raise GeometryError("length_x must be positive")
        if not self.viscosity > 0:
            raise GeometryError("viscosity must be positive")
        if self.friction_alpha < 0:
            raise GeometryError("friction_alpha must be nonnegative")
        if int(self.modes_x) != self.modes_x or self.modes_x < MIN_MODES_X:
            raise GeometryError(f"modes_x must be an integer >= {MIN_MODES_X}")
        if int(self.nodes_y) != self.nodes_y or self.nodes_y < MIN_NODES_Y:
            raise GeometryError(f"nodes_y must be an integer >= {MIN_NODES_Y}")


def cheb_lobatto_nodes(n: int) -> np.ndarray:
    """Chebyshev-Lobatto nodes mapped to [0, 1], ascending, endpoints included."""
    i = np.arange(n)
    return 0.5 * (1.0 - np.cos(np.pi * i / (n - 1)))


def _cheb_bary_weights(n: int) -> np.ndarray:
    w = np.ones(n)
    w[1::2] = -1.0
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def diff_matrix(nodes: np.ndarray, bary_w: np.ndarray) -> np.ndarray:
    """Barycentric differentiation matrix with the negative-sum diagonal."""
    n = nodes.size
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                d[i, j] = (bary_w[j] / bary_w[i]) / (nodes[i] - nodes[j])
    d[np.diag_indices(n)] = -d.sum(axis=1)
    return d


def interp_matrix(nodes: np.ndarray, bary_w: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Barycentric interpolation matrix from `nodes` to `targets`."""
    p = np.zeros((targets.size, nodes.size))
    for m, t in enumerate(targets):
        hit = np.nonzero(np.isclose(t, nodes, rtol=0.0, atol=1e-14))[0]
        if hit.size:
            p[m, hit[0]] = 1.0
            continue
        terms = bary_w / (t - nodes)
        p[m] = terms / terms.sum()
    return p


def gauss_legendre_01(nq: int):
    x, w = np.polynomial.legendre.leggauss(nq)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True, eq=False)
class Grid:
    """Immutable discrete geometry shared by all field operations.

    x quadrature is the equispaced rule on n_x points (exact on trig
    polynomials of degree < n_x); y carries both the Chebyshev-Lobatto
    representation nodes and an embedded Gauss-Legendre quadrature fine
    enough for exact triple products of collocation polynomials.
    """

    spec: DomainSpec
    x_nodes: np.ndarray        # (n_x,) equispaced in [0, L_x)
    y_cgl: np.ndarray          # (n_y,) Chebyshev-Lobatto nodes in [0, 1]
    d1: np.ndarray             # (n_y, n_y) differentiation on CGL nodes
    d2: np.ndarray             # d1 @ d1
    y_nodes: np.ndarray        # (n_q,) Gauss quadrature nodes in (0, 1)
    w_y: np.ndarray            # (n_q,) Gauss weights, sum = 1
    interp: np.ndarray         # (n_q, n_y) CGL values -> Gauss values
    interp_d1: np.ndarray      # (n_q, n_y) CGL values -> first derivative at Gauss
    interp_d2: np.ndarray      # (n_q, n_y) CGL values -> second derivative at Gauss
    kx: np.ndarray             # (modes_x + 1,) wavenumbers 2*pi*j/L_x

    @property
    def n_x(self) -> int:
        return self.x_nodes.size

    @property
    def n_y(self) -> int:
        return self.y_cgl.size

    @property
    def n_q(self) -> int:
        return self.y_nodes.size

    @property
    def w_x(self) -> float:
        return self.spec.length_x / self.n_x

    @property
    def quad_weights_domain(self) -> np.ndarray:
        """(n_x, n_q) tensor-product weights; sums to the channel area L_x * 1."""
        return np.full((self.n_x, 1), self.w_x) * self.w_y[None, :]

    @property
    def wall_ids(self) -> dict:
        return {BOTTOM: 0.0, TOP: 1.0}

    def outward_normal(self, wall: str) -> np.ndarray:
        if wall == BOTTOM:
            return np.array([0.0, -1.0])
        if wall == TOP:
            return np.array([0.0, 1.0])
        raise GeometryError(f"unknown wall {wall!r}")

    def tangent(self, wall: str) -> np.ndarray:
        # Rotate the outward normal by +pi/2 so (n, tau) keeps the standard
        # orientation of the plane on both walls.
        n = self.outward_normal(wall)
        return np.array([-n[1], n[0]])


def build_grid(spec: DomainSpec) -> Grid:
    """Construct the collocation/quadrature grid for a domain specification."""
    if not isinstance(spec, DomainSpec):
        spec = DomainSpec(**spec)
    k = spec.modes_x
    n_x = max(8, 4 * k)  # >= 3K+2: quadratic products de-alias exactly
    x = np.arange(n_x) * (spec.length_x / n_x)

    n_y = spec.nodes_y
    y = cheb_lobatto_nodes(n_y)
    bw = _cheb_bary_weights(n_y)
    d1 = diff_matrix(y, bw)
    d2 = d1 @ d1

    n_q = int(np.ceil(1.5 * n_y)) + 2  # exact for triple products of profiles
    yq, wq = gauss_legendre_01(n_q)
    p = interp_matrix(y, bw, yq)

    kx = 2.0 * np.pi * np.arange(k + 1) / spec.length_x
    return Grid(
        spec=spec,
        x_nodes=x,
        y_cgl=y,
        d1=d1,
        d2=d2,
        y_nodes=yq,
        w_y=wq,
        interp=p,
        interp_d1=p @ d1,
        interp_d2=p @ d2,
        kx=kx,
    )


def integrate_domain(samples: np.ndarray, grid: Grid) -> float:
    """Integrate a scalar field sampled at (x_nodes, y_nodes) over the channel."""
    samples = np.asarray(samples)
    if samples.shape != (grid.n_x, grid.n_q):
        raise GeometryError(
            f"expected samples of shape {(grid.n_x, grid.n_q)}, got {samples.shape}"
        )
    return float(grid.w_x * samples.sum(axis=0) @ grid.w_y)


def integrate_boundary(traces: dict, grid: Grid) -> float:
    """Integrate wall traces over the boundary (sum of the two wall line integrals).

    `traces` maps wall name to samples at the x nodes of that wall.
    """
    missing = [w for w in WALLS if w not in traces]
    if missing:
        raise GeometryError(f"missing traces for walls: {missing}")
    total = 0.0
    for wall in WALLS:
        t = np.asarray(traces[wall])
        if t.shape != (grid.n_x,):
            raise GeometryError(
                f"expected {grid.n_x} samples on wall {wall!r}, got shape {t.shape}"
            )
        total += grid.w_x * t.sum()
    return float(total)
