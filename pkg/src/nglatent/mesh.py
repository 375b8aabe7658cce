"""1D interval meshes and finite-element matrices for the SPDE operators.

Linear hat-function elements with a lumped (diagonal) mass matrix: the
lumping row sums h_i = sum_j C_ij are the mesh weights that scale the
innovation variance on irregular grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import InputError

__all__ = ["Mesh1D", "FemMatrices", "build_interval_mesh", "fem_matrices"]


@dataclass(frozen=True)
class Mesh1D:
    """Strictly increasing node locations and their lumped-mass weights."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.nodes.shape[0]

    @property
    def spacings(self) -> np.ndarray:
        return np.diff(self.nodes)


@dataclass(frozen=True)
class FemMatrices:
    """Lumped mass matrix C, stiffness matrix G, advection matrix B."""

    C_lumped: sparse.csr_matrix
    G: sparse.csr_matrix
    B: sparse.csr_matrix


def build_interval_mesh(nodes) -> Mesh1D:
    """Build a 1D mesh from strictly increasing node locations.

    Weights come from lumping the hat-basis mass matrix: interior
    h_i = (x_{i+1} - x_{i-1}) / 2, boundary h_1 = (x_2 - x_1) / 2 and
    h_n = (x_n - x_{n-1}) / 2, so sum(h) equals the domain length.
    """
    x = np.asarray(nodes, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise InputError("mesh needs at least two nodes")
    dx = np.diff(x)
    if np.any(dx <= 0):
        raise InputError("mesh nodes must be strictly increasing")
    h = np.zeros(x.size)
    h[:-1] += dx / 2.0
    h[1:] += dx / 2.0
    return Mesh1D(nodes=x, weights=h)


def regular_mesh(start: float, end: float, n: int) -> Mesh1D:
    """Uniform mesh with n nodes on [start, end]."""
    if n < 2:
        raise InputError("mesh needs at least two nodes")
    return build_interval_mesh(np.linspace(start, end, n))


def fem_matrices(mesh: Mesh1D, advection: float = 0.0) -> FemMatrices:
    """Assemble lumped mass, stiffness, and advection matrices.

    G is the tridiagonal hat-basis stiffness (Neumann boundaries, rows
    sum to zero); B is the standard first-derivative coupling
    B_ij = advection * <psi_i, psi_j'>, zero when advection = 0.
    """
    n = mesh.n
    dx = mesh.spacings
    C = sparse.diags(mesh.weights, format="csr")

    inv = 1.0 / dx
    main = np.zeros(n)
    main[:-1] += inv
    main[1:] += inv
    G = sparse.diags([-inv, main, -inv], offsets=[-1, 0, 1], format="csr")

    if advection == 0.0:
        B = sparse.csr_matrix((n, n))
    else:
        # elementwise <psi_i, psi_j'> is spacing-free: local [[-1/2, 1/2], [-1/2, 1/2]]
        lower = np.full(n - 1, -0.5)
        upper = np.full(n - 1, 0.5)
        main_b = np.zeros(n)
        main_b[0] = -0.5
        main_b[-1] = 0.5
        B = advection * sparse.diags(
            [lower, main_b, upper], offsets=[-1, 0, 1], format="csr"
        )
    return FemMatrices(C_lumped=C, G=G, B=sparse.csr_matrix(B))
