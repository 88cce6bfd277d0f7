"""Independent oracle implementations shared by the test modules.

These deliberately avoid the package's vectorized paths: plain per-element
loops and dense linear algebra, so they can disagree with the implementation
if it is wrong.
"""

import numpy as np

from stvf.mesh import FeFunction


def random_zero_trace(mesh, rng, scale=1.0):
    values = np.zeros(mesh.n_nodes)
    values[mesh.free_nodes] = scale * rng.standard_normal(len(mesh.free_nodes))
    return FeFunction(values, zero_trace=True)


def tri_geometry(mesh, e):
    """Area and the three basis gradients of one element, recomputed densely."""
    coords = mesh.nodes[mesh.triangles[e]]
    e1 = coords[1] - coords[0]
    e2 = coords[2] - coords[0]
    twice = e1[0] * e2[1] - e1[1] * e2[0]
    grads = np.zeros((3, 2))
    for k in range(3):
        a, b = coords[(k + 1) % 3], coords[(k + 2) % 3]
        grads[k] = [(a[1] - b[1]) / twice, (b[0] - a[0]) / twice]
    return 0.5 * twice, grads


def tv_load_oracle(u, eps, mesh):
    """Brute-force elementwise quadrature of the regularized TV load."""
    load = np.zeros(mesh.n_nodes)
    for e in range(mesh.n_elements):
        area, grads = tri_geometry(mesh, e)
        grad_u = np.zeros(2)
        for k, node in enumerate(mesh.triangles[e]):
            grad_u += u.values[node] * grads[k]
        denom = np.sqrt(grad_u @ grad_u + eps * eps)
        for k, node in enumerate(mesh.triangles[e]):
            load[node] += area * (grad_u @ grads[k]) / denom
    load[mesh.boundary_mask] = 0.0
    return load


def positivity_oracle(u, eps, mesh):
    """Dense enumeration of the per-element matrix identity for q(u).

    q(u) = sum_{K,K'} c_K vbar^T A_K^T Mfree^{-1} A_K' vbar with
    c_K = (|grad u|_K^2 + eps^2)^{-1/2}, all matrices on the free nodes.
    """
    free = mesh.free_nodes
    renumber = {node: j for j, node in enumerate(free)}
    nf = len(free)
    m_free = np.zeros((nf, nf))
    mass_pattern = (np.ones((3, 3)) + np.eye(3)) / 12.0
    a_k_v = np.zeros(nf)          # sum_K c_K A_K vbar
    a_v = np.zeros(nf)            # sum_K A_K vbar
    for e in range(mesh.n_elements):
        area, grads = tri_geometry(mesh, e)
        nodes = mesh.triangles[e]
        grad_u = np.zeros(2)
        for k, node in enumerate(nodes):
            grad_u += u.values[node] * grads[k]
        c = 1.0 / np.sqrt(grad_u @ grad_u + eps * eps)
        stiff = area * (grads @ grads.T)
        for i, ni in enumerate(nodes):
            if ni not in renumber:
                continue
            row = renumber[ni]
            for j, nj in enumerate(nodes):
                if nj in renumber:
                    m_free[row, renumber[nj]] += area * mass_pattern[i, j]
                contrib = stiff[i, j] * u.values[nj]
                a_v[row] += contrib
                a_k_v[row] += c * contrib
    return float(a_k_v @ np.linalg.solve(m_free, a_v))


def step_residual_scalar(x, x_prev, noise, g, p, mesh):
    """Residual of the implicit step on the single free node of the n=2 mesh.

    Recomputed densely from the element loops; used to bracket the root for
    the bisection oracle.
    """
    center = mesh.free_nodes[0]
    tau = p.tau
    u = np.zeros(mesh.n_nodes)
    u[center] = x
    mass_pattern = (np.ones((3, 3)) + np.eye(3)) / 12.0
    r = 0.0
    for e in range(mesh.n_elements):
        area, grads = tri_geometry(mesh, e)
        nodes = list(mesh.triangles[e])
        if center not in nodes:
            continue
        i = nodes.index(center)
        grad_u = np.zeros(2)
        for k, node in enumerate(nodes):
            grad_u += u[node] * grads[k]
        denom = np.sqrt(grad_u @ grad_u + p.eps * p.eps)
        for k, node in enumerate(nodes):
            pair = area * mass_pattern[i, k]
            stiff = area * (grads[i] @ grads[k])
            r += pair * u[node]                       # (X, phi)
            r += tau * p.delta * stiff * u[node]      # tau delta (grad X, grad phi)
            r += tau * p.lam * pair * (u[node] - g.values[node])
            r -= pair * x_prev.values[node]
        r += tau * area * (grad_u @ grads[i]) / denom
    return r - noise
