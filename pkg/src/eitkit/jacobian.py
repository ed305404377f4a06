"""Measurement Jacobians by three engines: adjoint, dual numbers, differences.

All engines produce the same matrix of shape (L*(L-1), n_active) with
columns ordered like :data:`eitkit.anomaly.PARAM_ORDER` restricted to
the active parameters (default all five).

The adjoint engine uses the identity dV/dw = -Gamma^T (dA/dw) theta,
where theta solves the forward systems and Gamma solves the adjoint
system A^T Gamma = M~^T (the matrix is symmetric, so the same solver
applies).  Only the conductivity block of the matrix depends on the
parameters, and its derivative is a weighted scatter of the precomputed
per-element stiffness integrals with the closed-form conductivity
derivatives as weights.

The dual-number engine seeds the active parameters with unit tangents
and runs the unchanged simulator; the linear solve resolves tangents
exactly through A theta_dot = -A_dot theta (or, behind a flag, by
carrying duals through every CG iteration).

The finite-difference engine exists as an independent oracle: central
differences of the plain simulator, two extra evaluations per column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anomaly import (
    PARAM_ORDER,
    SmoothingConfig,
    conductivity_gradient,
    element_conductivities,
    params_to_vector,
    seed_params,
    vector_to_params,
)
from .forward import DEFAULT_CG_TOL, assemble_system, simulate, solve_system, trig_patterns
from .mesh import ElectrodeLayout

__all__ = [
    "JacobianComparison",
    "jacobian_analytic",
    "jacobian_ad",
    "jacobian_fd",
    "finite_difference_jacobian",
    "compare_jacobians",
]

DEFAULT_FD_STEP = 1e-5


def _active_indices(active):
    try:
        return [PARAM_ORDER.index(name) for name in active]
    except ValueError as exc:
        raise ValueError(f"unknown parameter in active set {active!r}") from exc


def jacobian_analytic(
    params,
    mesh,
    layout=None,
    smoothing=None,
    active=PARAM_ORDER,
    patterns=None,
    cg_tol=DEFAULT_CG_TOL,
    method="cg",
):
    """Jacobian via the adjoint identity dV/dw = -Gamma^T (dA/dw) theta.

    One forward solve per pattern plus L adjoint right-hand sides; the
    forward and adjoint systems share the matrix, so they are solved as
    one block.  The per-element stiffness integrals are reused from the
    mesh, and the conductivity derivatives come from the closed-form
    chain rule of the anomaly model.
    """
    if layout is None:
        layout = ElectrodeLayout()
    if smoothing is None:
        smoothing = SmoothingConfig()
    if patterns is None:
        patterns = trig_patterns(layout.count)
    sigma = element_conductivities(params, mesh, smoothing)
    system = assemble_system(mesh, sigma, layout, patterns)
    n = system.n_nodes
    count = layout.count

    adjoint_rhs = np.zeros((system.dim, count))
    adjoint_rhs[n:, :] = system.voltage_basis.T

    stacked = np.concatenate([system.rhs, adjoint_rhs], axis=1)
    solution = solve_system(
        _with_rhs(system, stacked), cg_tol=cg_tol, method=method
    )
    n_patterns = system.rhs.shape[1]
    theta = solution[:, :n_patterns]
    gamma = solution[:, n_patterns:]

    indices = _active_indices(active)
    dsigma = conductivity_gradient(params, mesh, smoothing)[:, indices]

    # Per-element contraction of dA/dw with theta and Gamma:
    # J[(j, l), w] = -sum_k dsigma_k/dw * Gamma[elem_k, l] . (S_k theta[elem_k, j]).
    elements = mesh.elements
    theta_elem = np.einsum("kab,kbj->kaj", mesh.local_stiffness, theta[:n][elements])
    gamma_elem = gamma[:n][elements]
    flat_gamma = gamma_elem.reshape(-1, count)
    flat_theta = theta_elem.reshape(-1, n_patterns)

    jac = np.empty((count * n_patterns, len(indices)))
    for col, w in enumerate(range(len(indices))):
        weights = np.repeat(dsigma[:, w], 3)
        block = -flat_gamma.T @ (weights[:, None] * flat_theta)
        jac[:, col] = block.T.reshape(-1)
    return jac


def _with_rhs(system, rhs):
    from dataclasses import replace

    return replace(system, rhs=rhs)


def jacobian_ad(
    params,
    mesh,
    layout=None,
    smoothing=None,
    active=PARAM_ORDER,
    patterns=None,
    cg_tol=DEFAULT_CG_TOL,
    method="cg",
    dual_mode="implicit",
):
    """Jacobian by forward-mode dual numbers through the simulator.

    Seeds the active parameters with unit tangents and reads the tangent
    block of the simulated measurements.  ``dual_mode="unrolled"``
    propagates the tangents through every CG iteration instead of using
    the exact tangent rule of the linear solve.
    """
    lifted = seed_params(params, active=active)
    measurements = simulate(
        lifted,
        mesh,
        layout,
        smoothing,
        patterns=patterns,
        cg_tol=cg_tol,
        method=method,
        dual_mode=dual_mode,
    )
    return np.array(measurements.tangent)


def finite_difference_jacobian(fn, x, step=DEFAULT_FD_STEP):
    """Central-difference Jacobian of a vector function at ``x``."""
    if step <= 0.0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    columns = []
    for i in range(x.size):
        forward = x.copy()
        backward = x.copy()
        forward[i] += step
        backward[i] -= step
        columns.append((fn(forward) - fn(backward)) / (2.0 * step))
    return np.stack(columns, axis=1)


def jacobian_fd(
    params,
    mesh,
    layout=None,
    smoothing=None,
    active=PARAM_ORDER,
    patterns=None,
    cg_tol=DEFAULT_CG_TOL,
    method="cg",
    step=DEFAULT_FD_STEP,
):
    """Central-difference Jacobian of the simulator (validation oracle)."""

    def fn(vector):
        probe = vector_to_params(vector, params, active=active)
        return simulate(
            probe,
            mesh,
            layout,
            smoothing,
            patterns=patterns,
            cg_tol=cg_tol,
            method=method,
        )

    return finite_difference_jacobian(fn, params_to_vector(params, active=active), step=step)


@dataclass(frozen=True)
class JacobianComparison:
    """Frobenius and per-column agreement between two Jacobians."""

    frobenius_diff: float
    relative_frobenius: float
    per_column_max_rel: np.ndarray

    def to_dict(self):
        return {
            "frobenius_diff": self.frobenius_diff,
            "relative_frobenius": self.relative_frobenius,
            "per_column_max_rel": self.per_column_max_rel.tolist(),
        }


def compare_jacobians(jac_a, jac_b):
    """Difference statistics; the first argument is the reference.

    Columns whose reference is identically zero report the absolute
    maximum difference instead of a relative one.
    """
    jac_a = np.asarray(jac_a)
    jac_b = np.asarray(jac_b)
    if jac_a.shape != jac_b.shape:
        raise ValueError(f"shape mismatch: {jac_a.shape} vs {jac_b.shape}")
    diff = jac_b - jac_a
    frobenius = float(np.linalg.norm(diff))
    ref_norm = float(np.linalg.norm(jac_a))
    relative = frobenius / ref_norm if ref_norm > 0.0 else frobenius
    col_max = np.abs(diff).max(axis=0)
    col_ref = np.abs(jac_a).max(axis=0)
    per_column = np.where(col_ref > 0.0, col_max / np.where(col_ref == 0.0, 1.0, col_ref), col_max)
    return JacobianComparison(
        frobenius_diff=frobenius,
        relative_frobenius=relative,
        per_column_max_rel=per_column,
    )
