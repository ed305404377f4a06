"""Acceptance suite: one test per criterion, each printing a verdict line.

Heavy batch criteria run 50 seeded cases on the desk-scale mesh pair
(measurement mesh h=0.05, inversion mesh h=0.06) with two workers; the
engine-agreement criteria run on a ~500-element mesh at tight solver
tolerance.  Each test prints one PASS line with its measured numbers;
a failing assertion marks the criterion red.
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np
import pytest

from eitkit import dual
from eitkit.anomaly import AnomalyParams, SmoothingConfig, smooth_heaviside
from eitkit.experiments import (
    DatasetSpec,
    benchmark_to_csv,
    generate_dataset,
    run_experiment,
    sample_anomaly,
    scaling_benchmark,
)
from eitkit.forward import ForwardModel, assemble_system, simulate, trig_patterns
from eitkit.inverse import LmConfig, reconstruct
from eitkit.jacobian import compare_jacobians, jacobian_ad, jacobian_analytic, jacobian_fd
from eitkit.mesh import ElectrodeLayout, build_disk_mesh
from eitkit.anomaly import element_conductivities

pytestmark = pytest.mark.acceptance

LAYOUT = ElectrodeLayout()
SMOOTHING = SmoothingConfig(0.03)


def report(number, name, detail):
    print(f"\nACCEPTANCE {number} ({name}): PASS [{detail}]")


def seeded_general_anomaly(seed, case_id):
    rng = np.random.default_rng([seed, case_id])
    return sample_anomaly(rng, DatasetSpec(n_cases=1, mode="general", seed=seed))


def test_criterion_1_jacobian_engine_equivalence():
    start = time.perf_counter()
    mesh = build_disk_mesh(0.16)
    assert 400 <= mesh.n_elements <= 700
    worst = 0.0
    for case_id in range(20):
        params = seeded_general_anomaly(11, case_id)
        j_ad = jacobian_ad(params, mesh, LAYOUT, SMOOTHING, cg_tol=1e-12)
        j_an = jacobian_analytic(params, mesh, LAYOUT, SMOOTHING, cg_tol=1e-12)
        rel = compare_jacobians(j_an, j_ad).relative_frobenius
        worst = max(worst, rel)
        assert rel <= 1e-8
    elapsed = time.perf_counter() - start
    report(
        1,
        "jacobian engine equivalence",
        f"20 cases on {mesh.n_elements} elements, worst relative Frobenius "
        f"{worst:.3e} <= 1e-8, {elapsed:.0f}s",
    )


def test_criterion_2_finite_difference_oracle():
    start = time.perf_counter()
    mesh = build_disk_mesh(0.16)
    worst = 0.0
    for case_id in range(10):
        params = seeded_general_anomaly(22, case_id)
        j_fd = jacobian_fd(params, mesh, LAYOUT, SMOOTHING, cg_tol=1e-12, step=1e-5)
        for engine in (jacobian_ad, jacobian_analytic):
            j = engine(params, mesh, LAYOUT, SMOOTHING, cg_tol=1e-12)
            col_err = compare_jacobians(j_fd, j).per_column_max_rel.max()
            worst = max(worst, float(col_err))
            assert col_err <= 1e-3

    flat = AnomalyParams(r=0.3, cx=0.2, cy=-0.1, sigma_in=1.1, sigma_out=1.1)
    geometry_worst = 0.0
    for engine in (jacobian_ad, jacobian_analytic, jacobian_fd):
        j = engine(flat, mesh, LAYOUT, SMOOTHING)
        geometry_worst = max(geometry_worst, float(np.abs(j[:, :3]).max()))
        assert np.abs(j[:, :3]).max() <= 1e-8
    elapsed = time.perf_counter() - start
    report(
        2,
        "finite-difference oracle",
        f"10 cases, worst column error {worst:.3e} <= 1e-3; zero-contrast geometry "
        f"columns <= {geometry_worst:.1e}, {elapsed:.0f}s",
    )


def test_criterion_3_fixed_conductivity_batch():
    start = time.perf_counter()
    spec = DatasetSpec(n_cases=50, mode="fixed", seed=0, data_mesh_h=0.05)
    dataset = generate_dataset(spec)
    result = run_experiment(dataset, inversion_mesh_h=0.06, jobs=2)
    mean_ad = result.summaries["true_ad"].mean
    mean_an = result.summaries["true_analytic"].mean
    cross_median = float(np.median(result.error_array("err_engines")))
    assert result.error_array("err_true_ad").size == 50
    assert result.error_array("err_true_analytic").size == 50
    assert mean_ad <= 0.1
    assert mean_an <= 0.1
    assert cross_median <= 0.01
    elapsed = time.perf_counter() - start
    report(
        3,
        "fixed-conductivity batch",
        f"50 cases: mean error ad={mean_ad:.4f}, analytic={mean_an:.4f} <= 0.1; "
        f"engine-difference median {cross_median:.2e} <= 0.01, {elapsed / 60:.1f} min",
    )


def test_criterion_4_general_conductivity_batch():
    start = time.perf_counter()
    spec = DatasetSpec(n_cases=50, mode="general", seed=0, data_mesh_h=0.05)
    dataset = generate_dataset(spec)
    result = run_experiment(dataset, inversion_mesh_h=0.06, jobs=2)
    means = {}
    fractions = {}
    for engine in ("ad", "analytic"):
        errors = result.error_array(f"err_true_{engine}")
        assert errors.size == 50
        means[engine] = float(np.mean(errors))
        fractions[engine] = float(np.mean(errors > 0.5))
        assert means[engine] <= 0.35
        assert fractions[engine] <= 0.10
    elapsed = time.perf_counter() - start
    report(
        4,
        "general-conductivity batch",
        f"50 cases: mean ad={means['ad']:.4f}, analytic={means['analytic']:.4f} <= 0.35; "
        f"fraction>0.5 ad={fractions['ad']:.2f}, analytic={fractions['analytic']:.2f} "
        f"<= 0.10, {elapsed / 60:.1f} min",
    )


def test_criterion_5_invariant_suite():
    start = time.perf_counter()
    mesh = build_disk_mesh(0.12)
    params = AnomalyParams(r=0.3, cx=0.1, cy=-0.2, sigma_in=1.4, sigma_out=0.7)
    sigma = element_conductivities(params, mesh, SMOOTHING)
    system = assemble_system(mesh, sigma, LAYOUT)

    # Stiffness symmetry, exactly.
    diff = (system.matrix - system.matrix.T).tocsr()
    assert diff.nnz == 0 or np.abs(diff.data).max() == 0.0

    # Positive definiteness on a small dense eigensolve.
    assert np.linalg.eigvalsh(system.matrix.toarray()).min() > 0.0

    # Current patterns sum to zero.
    patterns = trig_patterns(LAYOUT.count)
    assert np.abs(patterns.matrix.sum(axis=1)).max() <= 1e-12 * 3.0 * LAYOUT.count

    # Per-pattern voltages sum to zero.
    measurements = simulate(params, mesh, LAYOUT, SMOOTHING).reshape(15, 16)
    assert (
        np.abs(measurements.sum(axis=1)).max()
        <= 1e-10 * np.linalg.norm(measurements, axis=1).max()
    )

    # Smoothed step symmetry.
    rng = np.random.default_rng(55)
    z = rng.uniform(-3.0, 3.0, size=200)
    cfg = SmoothingConfig(rng.uniform(1e-3, 0.5))
    assert np.abs(smooth_heaviside(z, cfg) + smooth_heaviside(-z, cfg) - 1.0).max() <= 1e-12

    # Conductivity/impedance scaling covariance.
    c = 3.7
    base = simulate(params, mesh, LAYOUT, SMOOTHING)
    scaled = simulate(
        replace(params, sigma_in=params.sigma_in * c, sigma_out=params.sigma_out * c),
        mesh,
        ElectrodeLayout(contact_impedance=tuple(z_l / c for z_l in LAYOUT.contact_impedance)),
        SMOOTHING,
    )
    covariance_err = np.abs(scaled - base / c).max() / np.abs(base / c).max()
    assert covariance_err <= 1e-8

    # Accepted-loss monotonicity on five seeded reconstructions.
    data_mesh = build_disk_mesh(0.1)
    model = ForwardModel(mesh=mesh, layout=LAYOUT, smoothing=SMOOTHING)
    lm_cfg = LmConfig(
        engine="analytic",
        active=("cx", "cy", "r"),
        max_iterations=6,
        rel_loss_threshold=1e-8,
    )
    initial = AnomalyParams(r=0.3, cx=0.0, cy=0.0, sigma_in=1.4, sigma_out=0.7)
    for seed in range(5):
        rng = np.random.default_rng([77, seed])
        true = AnomalyParams(
            r=rng.uniform(0.15, 0.5),
            cx=rng.uniform(-0.4, 0.4),
            cy=rng.uniform(-0.4, 0.4),
            sigma_in=1.4,
            sigma_out=0.7,
        )
        m_true = simulate(true, data_mesh, LAYOUT, SMOOTHING)
        _, trace = reconstruct(m_true, initial, lm_cfg, model)
        losses = trace.accepted_losses()
        assert len(losses) >= 1
        assert all(b < a for a, b in zip(losses, losses[1:]))

    # Dual arithmetic with zero tangents reproduces the real path bitwise.
    lifted = AnomalyParams(
        r=dual.constant(params.r, 5),
        cx=dual.constant(params.cx, 5),
        cy=dual.constant(params.cy, 5),
        sigma_in=dual.constant(params.sigma_in, 5),
        sigma_out=dual.constant(params.sigma_out, 5),
    )
    dual_measurements = simulate(lifted, mesh, LAYOUT, SMOOTHING)
    assert np.array_equal(dual_measurements.value, base)
    assert np.all(dual_measurements.tangent == 0.0)

    elapsed = time.perf_counter() - start
    report(
        5,
        "invariant suite",
        f"symmetry exact, SPD, pattern/voltage sums, step symmetry, scaling "
        f"covariance {covariance_err:.1e} <= 1e-8, LM monotone on 5 runs, "
        f"dual zero-tangent bitwise, {elapsed:.0f}s",
    )


def test_criterion_6_scaling_benchmark(tmp_path):
    start = time.perf_counter()
    sizes = [0.16, 0.08, 0.05, 0.035, 0.028]
    rows = scaling_benchmark(sizes, n_repeats=3, seed=33)
    elements = [row["elements"] for row in rows]
    assert elements[0] <= 700
    assert elements[-1] >= 7000
    assert all(b > a for a, b in zip(elements, elements[1:]))
    for engine in ("ad", "analytic"):
        times = [row[f"time_{engine}_s"] for row in rows]
        assert all(b >= a for a, b in zip(times, times[1:])), f"{engine} medians not monotone: {times}"
    ratios = [row["nnz"] / row["elements"] for row in rows]
    assert max(ratios) / min(ratios) <= 1.5

    csv_path = tmp_path / "bench.csv"
    csv_path.write_text(benchmark_to_csv(rows), encoding="utf-8")
    lines = csv_path.read_text().strip().split("\n")
    assert len(lines) == len(sizes) + 1

    # Run-to-run stability at the smallest size.
    repeat = scaling_benchmark(sizes[:2], n_repeats=3, seed=33)
    for engine in ("ad", "analytic"):
        a = rows[0][f"time_{engine}_s"]
        b = repeat[0][f"time_{engine}_s"]
        assert abs(a - b) <= 0.5 * max(a, b)

    elapsed = time.perf_counter() - start
    report(
        6,
        "scaling benchmark",
        f"elements {elements[0]}..{elements[-1]}, per-engine medians monotone, "
        f"nnz/element spread {max(ratios) / min(ratios):.2f}, {elapsed / 60:.1f} min",
    )
