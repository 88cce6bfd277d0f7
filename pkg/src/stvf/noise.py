"""Seeded Wiener increments and the multiplicative noise load vectors.

Streams are derived from a 64-bit master seed with a keyed hash, so distinct
samples use disjoint counter-based generators (Philox) and any path can be
regenerated bit-for-bit from (seed, shape). Boundary-node increments are never
drawn: the discrete noise lives in the zero-trace space.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np

from .fem_core import _MASS_PATTERN, element_gradients
from .linalg import SparseMatrix, spmv
from .mesh import FeFunction, Mesh


class NoiseKind(enum.Enum):
    """Which diffusion coefficient multiplies the Wiener increment."""

    LINEAR = "linear"        # scalar noise X dW
    TRACKING = "tracking"    # sigma_1(X) = |X - g|
    GRADIENT = "gradient"    # sigma_2(X) = |grad X|
    ADDITIVE = "additive"    # sigma_3 = 1

    @property
    def scalar(self) -> bool:
        """True when the path is a single scalar Wiener process."""
        return self is NoiseKind.LINEAR


def derive_seed(master_seed: int, *indices: int) -> int:
    """Stable 64-bit stream key from (master_seed, indices...)."""
    h = hashlib.blake2b(digest_size=8)
    for part in (master_seed, *indices):
        h.update(int(part).to_bytes(16, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


def _generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


@dataclass(frozen=True)
class WienerPath:
    """Increments of the driving noise for one realization.

    increments has shape (N,) for scalar noise and (N, n_nodes) for nodal
    space-time noise with exact zeros in boundary columns. Every drawn entry
    is Normal(0, tau), independent across steps and nodes.
    """

    seed: int
    tau: float
    increments: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    def checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(np.ascontiguousarray(self.increments).tobytes())
        h.update(repr(self.increments.shape).encode())
        return h.hexdigest()


def sample_path(seed: int, n_steps: int, mesh: Mesh, kind: NoiseKind,
                tau: float) -> WienerPath:
    """Draw the Wiener increments for one trajectory.

    Scalar kinds draw N increments; space-time kinds draw N increments per
    interior node, in node order, and leave boundary columns at zero.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if tau <= 0:
        raise ValueError("tau must be positive")
    rng = _generator(seed)
    scale = np.sqrt(tau)
    if kind.scalar:
        increments = rng.standard_normal(n_steps) * scale
    else:
        free = mesh.free_nodes
        increments = np.zeros((n_steps, mesh.n_nodes))
        increments[:, free] = rng.standard_normal((n_steps, len(free))) * scale
    increments.setflags(write=False)
    return WienerPath(seed=seed, tau=tau, increments=increments)


def noise_load(x_prev: FeFunction, g: FeFunction, path: WienerPath, step: int,
               kind: NoiseKind, mu: float, mesh: Mesh,
               m: SparseMatrix) -> np.ndarray:
    """Noise load vector mu (sigma(X_prev) dW, phi_l) for step i in [1, N].

    For the scalar kind this is (X_prev, phi_l) dW_i times mu (the analysis
    scheme uses mu = 1). Dirichlet rows are zeroed.
    """
    if not 1 <= step <= path.n_steps:
        raise ValueError(f"step {step} outside [1, {path.n_steps}]")
    dw = path.increments[step - 1]
    if kind.scalar:
        load = mu * float(dw) * spmv(m, x_prev.values)
    elif kind is NoiseKind.ADDITIVE:
        load = mu * spmv(m, dw)
    elif kind is NoiseKind.TRACKING:
        # nodal interpolation of |X - g| dW, paired exactly with the mass matrix
        load = mu * spmv(m, np.abs(x_prev.values - g.values) * dw)
    elif kind is NoiseKind.GRADIENT:
        # |grad X| is constant per element; integrate phi_m phi_l elementwise
        grads = element_gradients(x_prev, mesh)
        grad_norm = np.sqrt(np.einsum("ed,ed->e", grads, grads))
        dw_local = dw[mesh.triangles]                       # (ne, 3)
        local = dw_local @ _MASS_PATTERN                    # pattern is symmetric
        contrib = (grad_norm * mesh.areas)[:, None] * local
        load = mu * np.bincount(
            mesh.triangles.ravel(), weights=contrib.ravel(), minlength=mesh.n_nodes
        )
    else:  # pragma: no cover
        raise ValueError(f"unknown noise kind {kind}")
    load[mesh.boundary_mask] = 0.0
    return load
