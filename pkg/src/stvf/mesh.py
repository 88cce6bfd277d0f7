"""Structured P1 triangulations of the unit square with Dirichlet boundary data.

The mesh is the usual n-by-n grid with every cell split along the same
diagonal (lower-left to upper-right), which keeps the family quasi-uniform and
the construction reproducible. Element areas and the constant basis gradients
are precomputed once; everything downstream works off those arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


@dataclass
class FeFunction:
    """Nodal coefficients of a piecewise-linear function on a mesh.

    zero_trace marks membership in the zero-boundary subspace; constructors
    enforce exact zeros at boundary nodes in that case.
    """

    values: np.ndarray
    zero_trace: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    def copy(self) -> "FeFunction":
        return FeFunction(self.values.copy(), self.zero_trace)


@dataclass(frozen=True)
class Mesh:
    """Triangulation of (0,1)^2: geometry, boundary mask, P1 element data."""

    n: int                      # subdivisions per side
    nodes: np.ndarray           # ((n+1)^2, 2) coordinates, x fastest
    triangles: np.ndarray       # (2 n^2, 3) node indices, counterclockwise
    boundary_mask: np.ndarray   # bool per node
    areas: np.ndarray           # per element
    grads: np.ndarray           # (n_elements, 3, 2) constant basis gradients
    h: float                    # max element diameter

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    @cached_property
    def free_nodes(self) -> np.ndarray:
        """Indices of interior (non-Dirichlet) nodes."""
        return np.flatnonzero(~self.boundary_mask)

    def node_index(self, ix: int, iy: int) -> int:
        return iy * (self.n + 1) + ix

    def shape_ratio(self) -> float:
        """Max over elements of diameter / inscribed-circle diameter."""
        p = self.nodes[self.triangles]  # (ne, 3, 2)
        edges = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]])
        lengths = np.linalg.norm(edges, axis=2)
        diam = lengths.max(axis=0)
        perimeter = lengths.sum(axis=0)
        inradius = 2.0 * self.areas / perimeter
        return float((diam / (2.0 * inradius)).max())


def build_unit_square_mesh(n: int) -> Mesh:
    """Uniform right-triangle mesh: (n+1)^2 nodes, 2 n^2 elements, h = sqrt(2)/n."""
    if n < 2:
        raise ValueError("n must be at least 2 (no interior node otherwise)")
    side = np.arange(n + 1) / n
    xs, ys = np.meshgrid(side, side, indexing="xy")
    nodes = np.column_stack([xs.ravel(), ys.ravel()])

    cells_x, cells_y = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    cx, cy = cells_x.ravel(), cells_y.ravel()
    p00 = cy * (n + 1) + cx
    p10 = p00 + 1
    p01 = p00 + (n + 1)
    p11 = p01 + 1
    # both triangles of a cell share the p00-p11 diagonal
    lower = np.column_stack([p00, p10, p11])
    upper = np.column_stack([p00, p11, p01])
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    boundary_mask = (
        (ii.ravel() == 0) | (ii.ravel() == n) | (jj.ravel() == 0) | (jj.ravel() == n)
    )

    p = nodes[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    twice_area = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    if np.any(twice_area <= 0):
        raise AssertionError("element orientation broken")
    areas = 0.5 * twice_area

    # grad of the barycentric coordinate at vertex k: perp of the opposite edge
    grads = np.empty((len(triangles), 3, 2))
    for k in range(3):
        a, b = p[:, (k + 1) % 3], p[:, (k + 2) % 3]
        grads[:, k, 0] = (a[:, 1] - b[:, 1]) / twice_area
        grads[:, k, 1] = (b[:, 0] - a[:, 0]) / twice_area

    for arr in (nodes, triangles, boundary_mask, areas, grads):
        arr.setflags(write=False)
    return Mesh(
        n=n,
        nodes=nodes,
        triangles=triangles,
        boundary_mask=boundary_mask,
        areas=areas,
        grads=grads,
        h=float(np.sqrt(2.0) / n),
    )


def interpolate(f, mesh: Mesh, zero_trace: bool = False) -> FeFunction:
    """Nodal interpolation: values[l] = f(node_l); boundary zeroed on request."""
    values = np.array([f(x, y) for x, y in mesh.nodes], dtype=np.float64)
    if zero_trace:
        values[mesh.boundary_mask] = 0.0
    return FeFunction(values, zero_trace=zero_trace)


def fe_zeros(mesh: Mesh, zero_trace: bool = True) -> FeFunction:
    return FeFunction(np.zeros(mesh.n_nodes), zero_trace=zero_trace)


def locate(mesh: Mesh, x: float, y: float):
    """Element containing (x, y) and the barycentric weights of its vertices."""
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValueError("point outside the unit square")
    n = mesh.n
    cx = min(int(np.floor(x * n)), n - 1)
    cy = min(int(np.floor(y * n)), n - 1)
    xi = x * n - cx
    eta = y * n - cy
    cell = cy * n + cx
    if eta <= xi:  # below the cell diagonal
        return 2 * cell, np.array([1.0 - xi, xi - eta, eta])
    return 2 * cell + 1, np.array([1.0 - eta, xi, eta - xi])


def nested_prolongation(coarse: Mesh, fine: Mesh) -> np.ndarray:
    """Dense matrix P with P[j, l] = phi_l(fine node j) for nested meshes.

    Requires fine.n to be a multiple of coarse.n; every fine element then lies
    inside exactly one coarse element, so P1 interpolation is exact.
    """
    if fine.n % coarse.n != 0:
        raise ValueError("meshes are not nested")
    p = np.zeros((fine.n_nodes, coarse.n_nodes))
    for j, (x, y) in enumerate(fine.nodes):
        elem, weights = locate(coarse, float(x), float(y))
        p[j, coarse.triangles[elem]] += weights
    return p


def mesh_info(mesh: Mesh) -> dict:
    """Counts and checksums reported by the mesh-info CLI subcommand."""
    from .linalg import kahan_sum

    return {
        "n": mesh.n,
        "nodes": mesh.n_nodes,
        "elements": mesh.n_elements,
        "interior_nodes": int(len(mesh.free_nodes)),
        "boundary_nodes": int(mesh.boundary_mask.sum()),
        "h": mesh.h,
        "area_sum": kahan_sum(mesh.areas),
        "shape_ratio": mesh.shape_ratio(),
    }
