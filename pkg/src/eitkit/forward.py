"""FEM forward solver for the Complete Electrode Model on the unit disk.

The voltage simulator maps a conductivity field to the electrode
voltages measured under every independent trigonometric current
pattern.  Discretizing the weak form with linear basis functions for
the interior potential and the Kirchhoff-respecting voltage basis
(eta_1 = (1,-1,0,...), eta_2 = (1,0,-1,...), ...) yields a sparse
symmetric positive definite system

    A theta = I~,   A = [[B1 + B2, C], [C^T, D]],

where only B1 depends on the conductivity.  B2, C and D collect the
contact-impedance line integrals over the electrode edges, which are
exact closed forms for linear basis functions on straight edges.

Systems are solved for all right-hand sides at once with a
Jacobi-preconditioned conjugate gradient; a dense solver is available
as an oracle for small meshes.  The solve path understands dual-valued
systems: the value system is solved first and every tangent direction
then solves A theta_dot = -A_dot theta, which is the exact derivative
of the linear solve.  An optional mode instead propagates tangents
through every CG iteration for cross-checking.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import csr_matrix

from .anomaly import SmoothingConfig, element_conductivities
from .dual import DualScalar
from .mesh import ElectrodeLayout, MeshError

__all__ = [
    "ModelError",
    "SolverError",
    "CurrentPatterns",
    "trig_patterns",
    "FemSystem",
    "assemble_system",
    "solve_system",
    "extract_voltages",
    "simulate",
    "ForwardModel",
    "solve_tally",
    "DEFAULT_AMPLITUDE",
]

DEFAULT_AMPLITUDE = 3.0
DEFAULT_CG_TOL = 1e-10


class ModelError(ValueError):
    """Raised for unphysical model inputs such as nonpositive conductivity."""


class SolverError(RuntimeError):
    """Raised when the linear solver cannot reach the requested residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass
class SolveTally:
    """Counts linear-solve work; tests assert the cost shape of engines."""

    systems: int = 0
    columns: int = 0
    iterations: int = 0

    def reset(self):
        self.systems = 0
        self.columns = 0
        self.iterations = 0


solve_tally = SolveTally()


@dataclass(frozen=True)
class CurrentPatterns:
    """L-1 simultaneous injection patterns, one per matrix row."""

    matrix: np.ndarray
    amplitude: float


def trig_patterns(count, amplitude=DEFAULT_AMPLITUDE):
    """Trigonometric current patterns on ``count`` electrodes.

    Row j (1-based) injects amplitude * cos(j * theta_l) for j up to
    count/2 and amplitude * sin((j - count/2) * theta_l) above, with
    theta_l = 2*pi*l/count the angle of electrode l.  The rows sum to
    zero and are linearly independent.
    """
    if count < 4 or count % 2 != 0:
        raise ModelError(f"electrode count must be even and >= 4, got {count}")
    theta = 2.0 * np.pi * np.arange(count) / count
    matrix = np.empty((count - 1, count))
    for j in range(1, count):
        if j <= count // 2:
            matrix[j - 1] = amplitude * np.cos(j * theta)
        else:
            matrix[j - 1] = amplitude * np.sin((j - count // 2) * theta)
    return CurrentPatterns(matrix=matrix, amplitude=float(amplitude))


@dataclass
class FemSystem:
    """Assembled CEM system for one conductivity field.

    ``matrix`` is the full sparse symmetric operator; the individual
    blocks are kept for inspection.  ``tangent_matrices`` holds the
    derivative of the matrix along each tangent direction when the
    conductivity was dual-valued (only the B1 block depends on it).
    """

    n_nodes: int
    n_electrodes: int
    matrix: csr_matrix
    rhs: np.ndarray
    voltage_basis: np.ndarray
    b1: csr_matrix = field(repr=False)
    b2: csr_matrix = field(repr=False)
    coupling: np.ndarray = field(repr=False)
    electrode_gram: np.ndarray = field(repr=False)
    tangent_matrices: list | None = field(default=None, repr=False)

    @property
    def dim(self):
        return self.n_nodes + self.n_electrodes - 1


def _coalesce(rows, cols, values, order_cache=None):
    """Sum duplicate COO entries in a deterministic, symmetric order.

    A stable sort by (row, col) keeps mirrored entries (i, j) and (j, i)
    in identical relative order, so the summed matrix is exactly equal
    to its transpose whenever the entry stream is symmetric.
    """
    if order_cache is None:
        keys = rows.astype(np.int64) * (cols.max() + 1) + cols
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        boundaries = np.flatnonzero(np.concatenate(([True], sorted_keys[1:] != sorted_keys[:-1])))
        urows = rows[order][boundaries]
        ucols = cols[order][boundaries]
        order_cache = (order, boundaries, urows, ucols)
    order, boundaries, urows, ucols = order_cache
    summed = np.add.reduceat(values[order], boundaries)
    return urows, ucols, summed, order_cache


def _build_csr(urows, ucols, data, dim):
    indptr = np.zeros(dim + 1, dtype=np.int64)
    np.add.at(indptr, urows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return csr_matrix((data, ucols.astype(np.int32), indptr), shape=(dim, dim))


def _element_scatter(mesh):
    """COO indices scattering the per-element 3x3 stiffness matrices."""
    cache = mesh._cache.get("scatter")
    if cache is None:
        elems = mesh.elements
        rows = np.repeat(elems, 3, axis=1).ravel()
        cols = np.tile(elems, (1, 3)).ravel()
        cache = (rows, cols, mesh.local_stiffness.reshape(-1))
        mesh._cache["scatter"] = cache
    return cache


def _electrode_terms(mesh, layout):
    """Contact-impedance integrals over the electrode edges.

    Returns COO triplets for B2, the node-electrode integral table F
    with F[i, l] = (1/z_l) * integral of phi_i over electrode l, and the
    electrode measures (polygonal edge lengths).
    """
    key = ("electrode", layout.count, layout.arc_length, layout.contact_impedance)
    cache = mesh._cache.get(key)
    if cache is not None:
        return cache
    z = layout.contact_impedance
    rows, cols, vals = [], [], []
    f_table = np.zeros((mesh.n_nodes, layout.count))
    measures = np.zeros(layout.count)
    for l, group in enumerate(mesh.electrode_edges):
        if len(group) == 0:
            raise MeshError(f"electrode {l} has no boundary edges")
        for e in group:
            a, b = mesh.boundary_edges[e]
            length = float(np.linalg.norm(mesh.nodes[a] - mesh.nodes[b]))
            measures[l] += length
            rows.extend((a, b, a, b))
            cols.extend((a, b, b, a))
            vals.extend(
                (length / (3.0 * z[l]), length / (3.0 * z[l]), length / (6.0 * z[l]), length / (6.0 * z[l]))
            )
            f_table[a, l] += length / (2.0 * z[l])
            f_table[b, l] += length / (2.0 * z[l])
    cache = (
        np.asarray(rows, dtype=np.int64),
        np.asarray(cols, dtype=np.int64),
        np.asarray(vals),
        f_table,
        measures,
    )
    mesh._cache[key] = cache
    return cache


def assemble_system(mesh, sigma_elements, layout, patterns=None):
    """Assemble the CEM system for a per-element conductivity field.

    ``sigma_elements`` may be a plain array or a dual-valued vector; in
    the dual case the matrix of tangent derivatives is assembled along
    each direction (assembly is linear in the conductivity).
    """
    if layout is None:
        layout = ElectrodeLayout()
    if patterns is None:
        patterns = trig_patterns(layout.count)
    n = mesh.n_nodes
    count = layout.count
    dim = n + count - 1

    is_dual = isinstance(sigma_elements, DualScalar)
    sigma_value = np.asarray(sigma_elements.value if is_dual else sigma_elements, dtype=float)
    if sigma_value.shape != (mesh.n_elements,):
        raise ModelError(
            f"need one conductivity per element ({mesh.n_elements}), got shape {sigma_value.shape}"
        )
    if not np.all(sigma_value > 0.0):
        raise ModelError("element conductivities must be positive")

    scatter_rows, scatter_cols, stiff_flat = _element_scatter(mesh)
    b1_vals = (sigma_value[:, None, None] * mesh.local_stiffness).reshape(-1)

    b2_rows, b2_cols, b2_vals, f_table, measures = _electrode_terms(mesh, layout)

    # Voltage-basis contractions of the electrode integrals.
    coupling = f_table[:, 1:] - f_table[:, [0]]
    z = layout.contact_impedance
    gram = np.full((count - 1, count - 1), measures[0] / z[0])
    gram[np.diag_indices(count - 1)] += measures[1:] / np.asarray(z[1:])

    c_rows, c_cols = np.nonzero(coupling)
    c_vals = coupling[c_rows, c_cols]
    d_rows, d_cols = np.divmod(np.arange((count - 1) ** 2), count - 1)

    all_rows = np.concatenate(
        [scatter_rows, b2_rows, c_rows, c_cols + n, d_rows + n]
    )
    all_cols = np.concatenate(
        [scatter_cols, b2_cols, c_cols + n, c_rows, d_cols + n]
    )
    all_vals = np.concatenate([b1_vals, b2_vals, c_vals, c_vals, gram.ravel()])

    urows, ucols, summed, order_cache = _coalesce(all_rows, all_cols, all_vals)
    matrix = _build_csr(urows, ucols, summed, dim)

    b1_u = _coalesce(scatter_rows, scatter_cols, b1_vals)
    b1 = _build_csr(b1_u[0], b1_u[1], b1_u[2], n)
    b2_u = _coalesce(b2_rows, b2_cols, b2_vals)
    b2 = _build_csr(b2_u[0], b2_u[1], b2_u[2], n)

    tangent_matrices = None
    if is_dual:
        width = sigma_elements.width
        tangent_matrices = []
        zeros_const = np.zeros(all_vals.size - b1_vals.size)
        tangent_data = (
            sigma_elements.tangent[:, None, None, :] * mesh.local_stiffness[..., None]
        ).reshape(-1, width)
        for p in range(width):
            vals_p = np.concatenate([tangent_data[:, p], zeros_const])
            _, _, summed_p, _ = _coalesce(all_rows, all_cols, vals_p, order_cache)
            tangent_matrices.append(_build_csr(urows, ucols, summed_p, dim))

    rhs = np.zeros((dim, count - 1))
    rhs[n:, :] = (patterns.matrix[:, [0]] - patterns.matrix[:, 1:]).T

    voltage_basis = np.zeros((count, count - 1))
    voltage_basis[0, :] = 1.0
    voltage_basis[1:, :] = -np.eye(count - 1)

    return FemSystem(
        n_nodes=n,
        n_electrodes=count,
        matrix=matrix,
        rhs=rhs,
        voltage_basis=voltage_basis,
        b1=b1,
        b2=b2,
        coupling=coupling,
        electrode_gram=gram,
        tangent_matrices=tangent_matrices,
    )


def _block_pcg(matrix, rhs, tol, max_iter):
    """Jacobi-preconditioned CG on all right-hand-side columns at once.

    Convergence is judged per column on the plain residual norm
    ||A x - b|| <= tol * ||b||; converged columns are frozen and the
    final answer is confirmed against the true residual, restarting if
    the recursion drifted.

    Tolerances below the float64 rounding floor of evaluating A @ x are
    unattainable for any solver.  When the residual stagnates, the true
    residual is compared against the backward-error bound
    eps * || |A| |x| || per column: at or below it the solve is accepted
    as converged to working precision, above it the stall is an error.
    """
    diag = matrix.diagonal()
    if np.any(diag <= 0.0):
        raise SolverError("system diagonal not positive; matrix is not SPD")
    dinv = 1.0 / diag
    abs_matrix = None

    def rounding_floor(x):
        nonlocal abs_matrix
        if abs_matrix is None:
            abs_matrix = csr_matrix(
                (np.abs(matrix.data), matrix.indices, matrix.indptr), shape=matrix.shape
            )
        rounding = abs_matrix @ np.abs(x)
        return 10.0 * np.finfo(float).eps * np.linalg.norm(rounding, axis=0)

    x = np.zeros_like(rhs)
    bnorm = np.linalg.norm(rhs, axis=0)
    bnorm_safe = np.where(bnorm == 0.0, 1.0, bnorm)
    target = tol * bnorm_safe
    r = rhs.copy()
    iterations = 0
    window = 100
    anchor_iter = 0
    anchor_worst = np.inf
    previous_true = np.inf

    while True:
        res = np.linalg.norm(r, axis=0)
        if np.all(res <= target):
            return x, iterations
        z = dinv[:, None] * r
        p = z.copy()
        rz = np.einsum("ij,ij->j", r, z)
        while iterations < max_iter:
            iterations += 1
            ap = matrix @ p
            pap = np.einsum("ij,ij->j", p, ap)
            active = res > target
            if np.any(pap[active] <= 0.0):
                raise SolverError("curvature not positive; matrix is not SPD")
            alpha = np.where(active, rz / np.where(pap == 0.0, 1.0, pap), 0.0)
            x += alpha * p
            r -= alpha * ap
            res = np.linalg.norm(r, axis=0)
            stalled = False
            if iterations - anchor_iter >= window:
                worst = float(np.max(res / bnorm_safe))
                stalled = worst > 0.9 * anchor_worst
                anchor_iter = iterations
                anchor_worst = worst
            if np.all(res <= target) or stalled:
                # Confirm against the true residual; the recursion drifts
                # at fine tolerances.  Restarting refines the answer
                # until restarts stop paying off, at which point a true
                # residual at the rounding floor counts as converged.
                true_r = rhs - matrix @ x
                true_res = np.linalg.norm(true_r, axis=0)
                if np.all(true_res <= target):
                    return x, iterations
                worst_true = float(np.max(true_res / bnorm_safe))
                saturated = worst_true > 0.95 * previous_true
                if saturated and np.all(true_res <= rounding_floor(x)):
                    return x, iterations
                previous_true = worst_true
                r = true_r
                break
            z = dinv[:, None] * r
            rz_new = np.einsum("ij,ij->j", r, z)
            beta = np.where(active, rz_new / np.where(rz == 0.0, 1.0, rz), 0.0)
            p = z + beta * p
            rz = rz_new
        else:
            true_r = rhs - matrix @ x
            true_res = np.linalg.norm(true_r, axis=0)
            if np.all(true_res <= np.maximum(target, rounding_floor(x))):
                return x, iterations
            worst = float(np.max(true_res / bnorm_safe))
            raise SolverError(
                f"CG did not converge in {max_iter} iterations "
                f"(worst relative residual {worst:.3e})",
                residual=worst,
            )


def _solve_columns(matrix, rhs, tol, method):
    solve_tally.systems += 1
    solve_tally.columns += rhs.shape[1]
    if method == "dense":
        return np.linalg.solve(matrix.toarray(), rhs)
    if method != "cg":
        raise ValueError(f"unknown solver method {method!r}")
    x, iterations = _block_pcg(matrix, rhs, tol, max_iter=10 * matrix.shape[0])
    solve_tally.iterations += iterations
    return x


def _dual_matvec(matrix, tangent_matrices, vec):
    value = matrix @ vec.value
    tangent = np.stack(
        [
            matrix @ vec.tangent[..., p] + tangent_matrices[p] @ vec.value
            for p in range(len(tangent_matrices))
        ],
        axis=-1,
    )
    return DualScalar(value, tangent)


def _unrolled_dual_pcg(system, tol, max_iter):
    """CG with dual arithmetic in every iteration (cross-check path).

    Each scalar operation of the standard preconditioned CG loop runs on
    dual numbers, including the Jacobi preconditioner, so the tangents
    are the exact derivatives of the iterates actually computed.
    """
    matrix = system.matrix
    tangents = system.tangent_matrices
    width = len(tangents)
    dim, n_rhs = system.rhs.shape

    diag = DualScalar(
        matrix.diagonal()[:, None],
        np.stack([t.diagonal() for t in tangents], axis=-1)[:, None, :],
    )
    b = DualScalar(system.rhs, np.zeros((dim, n_rhs, width)))
    x = DualScalar(np.zeros((dim, n_rhs)), np.zeros((dim, n_rhs, width)))
    r = b
    bnorm = np.linalg.norm(b.value, axis=0)
    target = tol * np.where(bnorm == 0.0, 1.0, bnorm)
    if np.all(np.linalg.norm(r.value, axis=0) <= target):
        return x
    z = r / diag
    p = z
    rz = (r * z).sum(axis=0)
    for _ in range(max_iter):
        ap = _dual_matvec(matrix, tangents, p)
        pap = (p * ap).sum(axis=0)
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        if np.all(np.linalg.norm(r.value, axis=0) <= target):
            return x
        z = r / diag
        rz_new = (r * z).sum(axis=0)
        beta = rz_new / rz
        p = z + beta * p
        rz = rz_new
    raise SolverError(f"dual CG did not converge in {max_iter} iterations")


def solve_system(system, cg_tol=DEFAULT_CG_TOL, method="cg", dual_mode="implicit"):
    """Solve the assembled system for all current patterns.

    For dual-valued systems the default mode solves the value system and
    then one tangent system per direction with right-hand side
    -A_dot theta (the right-hand side and voltage basis do not depend on
    the conductivity); ``dual_mode="unrolled"`` instead carries tangents
    through the CG iterations themselves.
    """
    if system.tangent_matrices is None:
        return _solve_columns(system.matrix, system.rhs, cg_tol, method)
    if dual_mode == "unrolled":
        solve_tally.systems += 1
        solve_tally.columns += system.rhs.shape[1]
        return _unrolled_dual_pcg(system, cg_tol, max_iter=10 * system.dim)
    if dual_mode != "implicit":
        raise ValueError(f"unknown dual mode {dual_mode!r}")
    theta = _solve_columns(system.matrix, system.rhs, cg_tol, method)
    # One block solve covers all tangent directions: the systems share
    # the matrix, only the right-hand sides -A_dot theta differ.
    width = len(system.tangent_matrices)
    n_rhs = system.rhs.shape[1]
    stacked = np.concatenate(
        [-(tmat @ theta) for tmat in system.tangent_matrices], axis=1
    )
    solution = _solve_columns(system.matrix, stacked, cg_tol, method)
    tangent = solution.reshape(theta.shape[0], width, n_rhs).transpose(0, 2, 1)
    return DualScalar(theta, tangent)


def extract_voltages(theta, system):
    """Electrode voltages V_j = M beta_j for every pattern column."""
    n = system.n_nodes
    basis = system.voltage_basis
    if isinstance(theta, DualScalar):
        value = basis @ theta.value[n:, :]
        tangent = np.tensordot(basis, theta.tangent[n:, :, :], axes=(1, 0))
        return DualScalar(value, tangent)
    return basis @ theta[n:, :]


def _flatten_pattern_major(voltages):
    if isinstance(voltages, DualScalar):
        value = voltages.value.T.reshape(-1)
        tangent = voltages.tangent.transpose(1, 0, 2).reshape(value.size, -1)
        return DualScalar(value, tangent)
    return voltages.T.reshape(-1)


def simulate(
    params,
    mesh,
    layout=None,
    smoothing=None,
    patterns=None,
    cg_tol=DEFAULT_CG_TOL,
    method="cg",
    dual_mode="implicit",
):
    """Voltage measurements for an anomaly, flattened pattern-major.

    Index (j, l) of the conceptual (pattern, electrode) table maps to
    flat position j * L + l.  The code path is identical for plain and
    dual-valued parameters.
    """
    if layout is None:
        layout = ElectrodeLayout()
    if smoothing is None:
        smoothing = SmoothingConfig()
    sigma = element_conductivities(params, mesh, smoothing)
    system = assemble_system(mesh, sigma, layout, patterns)
    theta = solve_system(system, cg_tol=cg_tol, method=method, dual_mode=dual_mode)
    voltages = extract_voltages(theta, system)
    return _flatten_pattern_major(voltages)


@dataclass(frozen=True)
class ForwardModel:
    """A fixed measurement setup: mesh, electrodes, patterns, solver.

    Bundles everything the inverse solver treats as constant, so a
    reconstruction is parameterized by the anomaly alone.
    """

    mesh: object
    layout: ElectrodeLayout = field(default_factory=ElectrodeLayout)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    patterns: CurrentPatterns | None = None
    cg_tol: float = DEFAULT_CG_TOL
    method: str = "cg"

    @property
    def n_measurements(self):
        return self.layout.count * (self.layout.count - 1)

    def simulate(self, params, dual_mode="implicit"):
        return simulate(
            params,
            self.mesh,
            self.layout,
            self.smoothing,
            patterns=self.patterns,
            cg_tol=self.cg_tol,
            method=self.method,
            dual_mode=dual_mode,
        )

    def with_mesh(self, mesh):
        return replace(self, mesh=mesh)
