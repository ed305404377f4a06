"""Tests for current patterns, CEM assembly, solver, and simulation."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from scipy.sparse import csr_matrix

from eitkit.anomaly import AnomalyParams, SmoothingConfig, element_conductivities, seed_params
from eitkit.forward import (
    ForwardModel,
    ModelError,
    SolverError,
    _block_pcg,
    assemble_system,
    extract_voltages,
    simulate,
    solve_system,
    solve_tally,
    trig_patterns,
)
from eitkit.mesh import ElectrodeLayout, build_disk_mesh

LAYOUT = ElectrodeLayout()
SMOOTHING = SmoothingConfig(0.03)


def make_params(**kwargs):
    defaults = dict(r=0.3, cx=0.1, cy=-0.2, sigma_in=1.4, sigma_out=0.7)
    defaults.update(kwargs)
    return AnomalyParams(**defaults)


def small_system(h=0.16, params=None):
    mesh = build_disk_mesh(h)
    sigma = element_conductivities(params or make_params(), mesh, SMOOTHING)
    return mesh, assemble_system(mesh, sigma, LAYOUT)


class TestTrigPatterns:
    def test_first_row_is_cosine_of_electrode_angles(self):
        patterns = trig_patterns(16, amplitude=3.0)
        theta = 2.0 * np.pi * np.arange(16) / 16
        assert np.allclose(patterns.matrix[0], 3.0 * np.cos(theta))

    def test_upper_rows_are_sines(self):
        patterns = trig_patterns(16, amplitude=3.0)
        theta = 2.0 * np.pi * np.arange(16) / 16
        assert np.allclose(patterns.matrix[8], 3.0 * np.sin(theta))

    def test_rows_sum_to_zero(self):
        patterns = trig_patterns(16, amplitude=3.0)
        sums = np.abs(patterns.matrix.sum(axis=1))
        assert sums.max() <= 1e-12 * 3.0 * 16

    def test_rows_linearly_independent(self):
        patterns = trig_patterns(16)
        rank = np.linalg.matrix_rank(patterns.matrix, tol=1e-10)
        assert rank == 15

    def test_odd_count_rejected(self):
        with pytest.raises(ModelError, match="even"):
            trig_patterns(15)


class TestAssembly:
    def test_matrix_exactly_symmetric(self):
        _, system = small_system()
        diff = (system.matrix - system.matrix.T).tocsr()
        assert diff.nnz == 0 or np.abs(diff.data).max() == 0.0

    def test_b1_row_sums_vanish_for_homogeneous_field(self):
        mesh = build_disk_mesh(0.16)
        system = assemble_system(mesh, np.ones(mesh.n_elements), LAYOUT)
        assert np.abs(system.b1 @ np.ones(mesh.n_nodes)).max() <= 1e-12

    def test_rhs_zero_on_node_block(self):
        mesh, system = small_system()
        assert np.all(system.rhs[: mesh.n_nodes, :] == 0.0)

    def test_rhs_tail_sum_reflects_kirchhoff(self):
        # Sum over the eta-basis entries: sum_k (I_0 - I_k) = L * I_0
        # because each pattern itself sums to zero.
        mesh, system = small_system()
        patterns = trig_patterns(LAYOUT.count)
        tail_sums = system.rhs[mesh.n_nodes :, :].sum(axis=0)
        assert np.allclose(tail_sums, LAYOUT.count * patterns.matrix[:, 0], atol=1e-10)

    def test_voltage_basis_structure(self):
        _, system = small_system()
        basis = system.voltage_basis
        assert np.all(basis[0] == 1.0)
        assert np.array_equal(basis[1:], -np.eye(LAYOUT.count - 1))

    def test_system_positive_definite_on_small_mesh(self):
        _, system = small_system()
        eigenvalues = np.linalg.eigvalsh(system.matrix.toarray())
        assert eigenvalues.min() > 0.0

    def test_spd_for_random_fields_and_impedances(self):
        mesh = build_disk_mesh(0.19)
        rng = np.random.default_rng(21)
        for _ in range(5):
            sigma = rng.uniform(0.1, 5.0, size=mesh.n_elements)
            z = tuple(rng.uniform(1e-6, 1.0, size=LAYOUT.count))
            layout = ElectrodeLayout(contact_impedance=z)
            system = assemble_system(mesh, sigma, layout)
            assert np.linalg.eigvalsh(system.matrix.toarray()).min() > 0.0

    def test_nonpositive_conductivity_rejected(self):
        mesh = build_disk_mesh(0.16)
        sigma = np.ones(mesh.n_elements)
        sigma[3] = 0.0
        with pytest.raises(ModelError, match="positive"):
            assemble_system(mesh, sigma, LAYOUT)

    def test_wrong_length_rejected(self):
        mesh = build_disk_mesh(0.16)
        with pytest.raises(ModelError, match="per element"):
            assemble_system(mesh, np.ones(7), LAYOUT)


class TestSolve:
    def test_hand_two_by_two_system(self):
        matrix = csr_matrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
        rhs = np.array([[1.0], [0.0]])
        x, _ = _block_pcg(matrix, rhs, tol=1e-14, max_iter=100)
        assert np.allclose(x[:, 0], [2.0 / 3.0, -1.0 / 3.0], rtol=1e-12)
        dense = np.linalg.solve(matrix.toarray(), rhs)
        assert np.allclose(x, dense, rtol=1e-12)

    def test_zero_rhs_column_gives_exact_zero(self):
        _, system = small_system()
        rhs = system.rhs.copy()
        rhs[:, 0] = 0.0
        x, _ = _block_pcg(system.matrix, rhs, tol=1e-10, max_iter=10 * system.dim)
        assert np.all(x[:, 0] == 0.0)

    def test_residual_postcondition_on_every_pattern(self):
        _, system = small_system()
        theta = solve_system(system, cg_tol=1e-10)
        residual = np.linalg.norm(system.matrix @ theta - system.rhs, axis=0)
        assert np.all(residual <= 1e-10 * np.linalg.norm(system.rhs, axis=0))

    def test_cg_matches_dense_oracle_on_small_mesh(self):
        _, system = small_system(h=0.19)
        cg = solve_system(system, cg_tol=1e-12)
        dense = solve_system(system, method="dense")
        rel = np.abs(cg - dense).max() / np.abs(dense).max()
        assert rel <= 1e-9

    def test_non_spd_matrix_raises(self):
        matrix = csr_matrix(np.array([[1.0, 0.0], [0.0, -1.0]]))
        with pytest.raises(SolverError, match="SPD"):
            _block_pcg(matrix, np.ones((2, 1)), tol=1e-10, max_iter=10)


class TestExtractVoltages:
    def test_first_basis_vector(self):
        _, system = small_system()
        theta = np.zeros((system.dim, 1))
        theta[system.n_nodes, 0] = 1.0
        voltages = extract_voltages(theta, system)
        expected = np.zeros(16)
        expected[0] = 1.0
        expected[1] = -1.0
        assert np.array_equal(voltages[:, 0], expected)

    def test_zero_coefficients_zero_voltages(self):
        _, system = small_system()
        voltages = extract_voltages(np.zeros((system.dim, 2)), system)
        assert np.all(voltages == 0.0)

    def test_voltages_sum_to_zero_for_random_coefficients(self):
        _, system = small_system()
        rng = np.random.default_rng(3)
        theta = rng.normal(size=(system.dim, 4))
        voltages = extract_voltages(theta, system)
        assert np.abs(voltages.sum(axis=0)).max() <= 1e-12 * np.abs(voltages).max()


class TestSimulate:
    def test_measurement_vector_shape_and_order(self):
        mesh = build_disk_mesh(0.16)
        m = simulate(make_params(), mesh, LAYOUT, SMOOTHING)
        assert m.shape == (16 * 15,)
        _, system = small_system()
        theta = solve_system(system, cg_tol=1e-10)
        voltages = extract_voltages(theta, system)
        assert np.array_equal(m, voltages.T.reshape(-1))

    def test_per_pattern_voltage_sums_vanish(self):
        mesh = build_disk_mesh(0.11)
        m = simulate(make_params(), mesh, LAYOUT, SMOOTHING).reshape(15, 16)
        norms = np.linalg.norm(m, axis=1)
        assert np.abs(m.sum(axis=1)).max() <= 1e-10 * norms.max()

    def test_scaling_covariance(self):
        # Scaling conductivity by c and contact impedances by 1/c scales
        # every voltage by 1/c.
        mesh = build_disk_mesh(0.11)
        params = make_params()
        base = simulate(params, mesh, LAYOUT, SMOOTHING)
        c = 3.7
        scaled_params = replace(
            params, sigma_in=params.sigma_in * c, sigma_out=params.sigma_out * c
        )
        scaled_layout = ElectrodeLayout(
            contact_impedance=tuple(z / c for z in LAYOUT.contact_impedance)
        )
        scaled = simulate(scaled_params, mesh, scaled_layout, SMOOTHING)
        assert np.abs(scaled - base / c).max() <= 1e-8 * np.abs(base / c).max()

    def test_rotation_equivariance_for_central_anomaly(self):
        # Rotating the first cosine pattern by one electrode equals the
        # cos/sin combination of patterns 1 and L/2+1; for a centered
        # anomaly the voltages inherit this up to mesh asymmetry.
        mesh = build_disk_mesh(0.06)
        params = make_params(cx=0.0, cy=0.0)
        m = simulate(params, mesh, LAYOUT, SMOOTHING).reshape(15, 16)
        delta = 2.0 * np.pi / 16
        combo = np.cos(delta) * m[0] + np.sin(delta) * m[8]
        deviation = np.abs(np.roll(m[0], 1) - combo).max()
        assert deviation < 0.05 * np.abs(m[0]).max()

    def test_mesh_pair_gap_is_nonzero(self):
        # Data simulated on a finer mesh must differ from the coarse
        # solver output, otherwise inversions would be too easy.
        params = make_params()
        fine = simulate(params, build_disk_mesh(0.05), LAYOUT, SMOOTHING)
        coarse = simulate(params, build_disk_mesh(0.06), LAYOUT, SMOOTHING)
        assert np.linalg.norm(fine - coarse) > 1e-6 * np.linalg.norm(fine)

    def test_refinement_convergence_is_monotone(self):
        params = make_params()
        levels = [0.16, 0.08, 0.04]
        voltages = [simulate(params, build_disk_mesh(h), LAYOUT, SMOOTHING) for h in levels]
        gap_coarse = np.linalg.norm(voltages[0] - voltages[1]) / np.linalg.norm(voltages[1])
        gap_fine = np.linalg.norm(voltages[1] - voltages[2]) / np.linalg.norm(voltages[2])
        assert gap_fine < gap_coarse

    def test_sensitivity_to_inside_conductivity(self):
        mesh = build_disk_mesh(0.11)
        base = simulate(make_params(cx=0.0, cy=0.0), mesh, LAYOUT, SMOOTHING)
        bumped = simulate(
            make_params(cx=0.0, cy=0.0, sigma_in=1.6), mesh, LAYOUT, SMOOTHING
        )
        assert np.linalg.norm(bumped - base) > 0.0

    def test_dual_values_bit_equal_to_real_path(self):
        mesh = build_disk_mesh(0.11)
        params = make_params()
        real = simulate(params, mesh, LAYOUT, SMOOTHING)
        lifted = simulate(seed_params(params), mesh, LAYOUT, SMOOTHING)
        assert np.array_equal(lifted.value, real)

    def test_forward_model_wrapper(self):
        mesh = build_disk_mesh(0.16)
        model = ForwardModel(mesh=mesh, layout=LAYOUT, smoothing=SMOOTHING)
        assert model.n_measurements == 240
        direct = simulate(make_params(), mesh, LAYOUT, SMOOTHING)
        assert np.array_equal(model.simulate(make_params()), direct)


class TestSolveTally:
    def test_counts_systems_and_columns(self):
        _, system = small_system()
        solve_tally.reset()
        solve_system(system, cg_tol=1e-10)
        assert solve_tally.systems == 1
        assert solve_tally.columns == 15
        assert solve_tally.iterations > 0
