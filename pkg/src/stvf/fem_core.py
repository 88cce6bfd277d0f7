"""Assembly and evaluation of the P1 operators driving the regularized flow.

All element integrals are closed-form for P1 (integrands are constant or
quadratic per triangle), so the only numerical error anywhere in this module
is rounding plus the CG tolerance of the two solves (discrete Laplacian,
L2 projection).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import SparseMatrix, cg_solve, kahan_sum, spmv
from .mesh import FeFunction, Mesh, nested_prolongation

# exact P1 element mass matrix is area/12 * [[2,1,1],[1,2,1],[1,1,2]]
_MASS_PATTERN = (np.ones((3, 3)) + np.eye(3)) / 12.0


def element_mass(coords) -> np.ndarray:
    """Element mass matrix for one triangle given its (3, 2) vertex coords."""
    coords = np.asarray(coords, dtype=np.float64)
    e1, e2 = coords[1] - coords[0], coords[2] - coords[0]
    area = 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0])
    return area * _MASS_PATTERN


def element_stiffness(coords) -> np.ndarray:
    """Element stiffness matrix: area times gradient dot products."""
    coords = np.asarray(coords, dtype=np.float64)
    e1, e2 = coords[1] - coords[0], coords[2] - coords[0]
    twice_area = e1[0] * e2[1] - e1[1] * e2[0]
    grads = np.empty((3, 2))
    for k in range(3):
        a, b = coords[(k + 1) % 3], coords[(k + 2) % 3]
        grads[k] = [(a[1] - b[1]) / twice_area, (b[0] - a[0]) / twice_area]
    return 0.5 * abs(twice_area) * (grads @ grads.T)


def assemble_mass(mesh: Mesh) -> SparseMatrix:
    """Global mass matrix over all nodes (SPD, row sums integrate the basis)."""
    tri = mesh.triangles
    vals = mesh.areas[:, None, None] * _MASS_PATTERN
    rows = np.repeat(tri, 3, axis=1)
    cols = np.tile(tri, (1, 3))
    return SparseMatrix.from_coo(mesh.n_nodes, mesh.n_nodes, rows, cols, vals)


def assemble_stiffness(mesh: Mesh) -> SparseMatrix:
    """Global stiffness matrix over all nodes (PSD; constants in the kernel)."""
    tri = mesh.triangles
    vals = np.einsum("ead,ebd->eab", mesh.grads, mesh.grads)
    vals *= mesh.areas[:, None, None]
    rows = np.repeat(tri, 3, axis=1)
    cols = np.tile(tri, (1, 3))
    return SparseMatrix.from_coo(mesh.n_nodes, mesh.n_nodes, rows, cols, vals)


def element_gradients(u: FeFunction, mesh: Mesh) -> np.ndarray:
    """Constant gradient of u on every element, shape (n_elements, 2)."""
    return np.einsum("ei,eid->ed", u.values[mesh.triangles], mesh.grads)


def element_gradient(u: FeFunction, mesh: Mesh, element: int) -> np.ndarray:
    """Constant gradient of u on one element."""
    if not 0 <= element < mesh.n_elements:
        raise IndexError("element index out of range")
    return u.values[mesh.triangles[element]] @ mesh.grads[element]


def mass_norm_sq(m: SparseMatrix, values: np.ndarray) -> float:
    """Quadratic form v^T M v; the discrete L2 norm squared when M is the mass."""
    return float(np.dot(values, spmv(m, values)))


def tv_operator_load(u: FeFunction, eps: float, mesh: Mesh) -> np.ndarray:
    """Load vector of the regularized total variation operator.

    Entry l is sum_K |K| (grad u / sqrt(|grad u|^2 + eps^2)) . grad phi_l,
    zeroed at Dirichlet rows. eps = 0 is admitted for diagnostics only and
    requires every element gradient to be nonzero.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    g = element_gradients(u, mesh)
    norm_sq = np.einsum("ed,ed->e", g, g)
    if eps == 0.0 and np.any(norm_sq == 0.0):
        raise ValueError("eps = 0 with a flat element: singular denominator")
    coef = mesh.areas / np.sqrt(norm_sq + eps * eps)
    contrib = np.einsum("ed,eid->ei", coef[:, None] * g, mesh.grads)
    load = np.bincount(
        mesh.triangles.ravel(), weights=contrib.ravel(), minlength=mesh.n_nodes
    )
    load[mesh.boundary_mask] = 0.0
    return load


def discrete_laplacian(
    u: FeFunction, mesh: Mesh, m: SparseMatrix, a: SparseMatrix, tol: float = 1e-12
) -> FeFunction:
    """Solve M w = -A u on the free nodes; w is zero on the boundary."""
    if not u.zero_trace:
        raise ValueError("discrete Laplacian is defined on the zero-trace space")
    free = mesh.free_nodes
    rhs = -spmv(a, u.values)[free]
    w_free, _ = cg_solve(m.restrict(free), rhs, tol=tol)
    w = np.zeros(mesh.n_nodes)
    w[free] = w_free
    return FeFunction(w, zero_trace=True)


def check_positivity(
    u: FeFunction, eps: float, mesh: Mesh, m: SparseMatrix, a: SparseMatrix
) -> float:
    """Pairing of the regularized TV flux with the discrete Laplacian, negated.

    Returns q(u) = -sum_K (|grad u|^2 + eps^2)^(-1/2) (grad u, grad Lap_h u)_K,
    which is nonnegative for every zero-trace u and eps > 0.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    w = discrete_laplacian(u, mesh, m, a)
    gu = element_gradients(u, mesh)
    gw = element_gradients(w, mesh)
    norm_sq = np.einsum("ed,ed->e", gu, gu)
    weights = mesh.areas / np.sqrt(norm_sq + eps * eps)
    return -kahan_sum(weights * np.einsum("ed,ed->e", gu, gw))


@dataclass(frozen=True)
class EnergyBreakdown:
    """Pieces of the regularized ROF energy of a field."""

    tv_eps: float    # integral of sqrt(|grad u|^2 + eps^2)
    tv: float        # same at eps = 0 (diagnostic total variation)
    fidelity: float  # (lambda/2) ||u - g||^2
    total: float     # tv_eps + fidelity


def energy(
    u: FeFunction, g: FeFunction, eps: float, lam: float, mesh: Mesh, m: SparseMatrix
) -> EnergyBreakdown:
    """Exact elementwise evaluation of the regularized energy."""
    grads = element_gradients(u, mesh)
    norm_sq = np.einsum("ed,ed->e", grads, grads)
    tv_eps = kahan_sum(mesh.areas * np.sqrt(norm_sq + eps * eps))
    tv = kahan_sum(mesh.areas * np.sqrt(norm_sq))
    diff = u.values - g.values
    fidelity = 0.5 * lam * mass_norm_sq(m, diff)
    return EnergyBreakdown(tv_eps, tv, fidelity, tv_eps + fidelity)


def l2_project(
    source: FeFunction,
    source_mesh: Mesh,
    target_mesh: Mesh,
    zero_trace: bool = False,
    source_mass: SparseMatrix | None = None,
    target_mass: SparseMatrix | None = None,
    tol: float = 1e-12,
) -> FeFunction:
    """L2-orthogonal projection of a P1 function on a nested finer mesh.

    The right-hand side (source, phi_l) is exact because each fine element
    lies inside one coarse element. Solves M p = b on all nodes, or on the
    free nodes with zero boundary when zero_trace is set.
    """
    if source_mass is None:
        source_mass = assemble_mass(source_mesh)
    if target_mass is None:
        target_mass = assemble_mass(target_mesh)
    prolong = nested_prolongation(target_mesh, source_mesh)
    b = prolong.T @ spmv(source_mass, source.values)
    if zero_trace:
        free = target_mesh.free_nodes
        p_free, _ = cg_solve(target_mass.restrict(free), b[free], tol=tol)
        values = np.zeros(target_mesh.n_nodes)
        values[free] = p_free
    else:
        values, _ = cg_solve(target_mass, b, tol=tol)
    return FeFunction(values, zero_trace=zero_trace)
