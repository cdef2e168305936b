"""Numbered end-to-end acceptance checks.

Each test exercises one advertised guarantee of the pipeline at its stated
tolerance, from element-level patch consistency up to byte-identical
parallel sweeps, and prints a one-line verdict so a verbose run reads as a
checklist.  Thresholds here are contractual: do not loosen them to make a
failing build green.
"""

import time

import numpy as np
import pytest

from spinefe.materials import MaterialField, Provenance, assign_uniform
from spinefe.mesh import PartRole, PhantomSpec, build_phantom, extract_surface, face_node_ids
from spinefe.metrics import (MeasurementCloud, compare_fields, idw_interpolate,
                             ks_two_sample, linear_regression)
from spinefe.pipeline import (SyntheticSpec, build_model, emit_reports,
                              fit_disc_to_force, load_config, run_sweep,
                              solve_entry, synth_measurement)
from spinefe.registration import RigidMotion, fit_rigid_motion
from spinefe.solver import (BoundaryConditionSet, apply_bcs, assemble,
                            reaction_force, solve_pcg)
from spinefe.strain import surface_strain_field

SWEEP_E_DISC = [4.15, 10.0, 25.0, 30.0, 35.0, 50.0]


def trend_config() -> dict:
    """Two-vertebra phantom, ~8.6k DOFs: cheap enough to sweep repeatedly."""
    return {
        "phantom": {"nx": 5, "ny": 4, "nz_vertebra": 4, "nz_disc": 2,
                    "nz_pot": 2},
        "constant_hu": 800.0,
        "sweep_e_disc_mpa": list(SWEEP_E_DISC),
        "synthetic": {"spacing_mm": 2.0, "systematic_um": 0.0,
                      "random_um": 0.0},
        "loading": {"flexion_angle_deg": 2.0, "compression_mm": 0.5},
        "seed": 11,
    }


def large_config() -> dict:
    """Same phantom refined to ~49k DOFs for the timing-bound closed loop."""
    cfg = trend_config()
    cfg["phantom"] = {"nx": 9, "ny": 7, "nz_vertebra": 9, "nz_disc": 4,
                      "nz_pot": 3}
    cfg["sweep_e_disc_mpa"] = [10.0]
    return cfg


def uniform_materials(mesh, e_mpa: float, nu: float) -> MaterialField:
    mat = MaterialField.unset_for(mesh)
    for pid in mesh.part_table:
        mat = assign_uniform(mat, pid, e_mpa, nu)
    return mat


@pytest.fixture(scope="module")
def trend_sweep():
    result = run_sweep(load_config(trend_config()))
    for entry in result.entries:
        assert entry.ok, entry.error
    return result


def test_01_affine_patch_field_reproduced():
    t0 = time.perf_counter()
    mesh = build_phantom(PhantomSpec(
        width_mm=12.0, depth_mm=12.0, vertebra_height_mm=8.0,
        pot_height_mm=4.0, n_vertebrae=1, nx=3, ny=3, nz_vertebra=2,
        nz_pot=1))
    assert mesh.n_elements >= 48
    materials = uniform_materials(mesh, 3000.0, 0.25)

    a = np.random.default_rng(1).normal(size=(3, 3))
    a *= 1e-3 / np.linalg.norm(a, 2)
    exterior = extract_surface(mesh, sorted(mesh.part_table))
    boundary = face_node_ids(exterior)
    bcs = BoundaryConditionSet(prescribed_nodes=boundary,
                               prescribed_values=mesh.nodes[boundary] @ a.T)
    system = apply_bcs(assemble(mesh, materials), bcs, mesh)
    u, _ = solve_pcg(system, tol=1e-12)

    # strains on the mid part's surface: its interface planes sit inside
    # the block, so they are governed by solved, not prescribed, nodes
    mid = extract_surface(mesh, mesh.part_ids_with_role(PartRole.VERTEBRA))
    solved_tris = int((~np.isin(mid.triangles, boundary)).any(axis=1).sum())
    assert solved_tris >= 8
    field = surface_strain_field(mid, u)
    assert field.n_missing == 0

    tri = mid.vertex_coords()[field.tri_ids]
    e1 = tri[:, 1] - tri[:, 0]
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    basis = np.stack([e1, np.cross(normal, e1)], axis=2)
    sym_a = 0.5 * (a + a.T)
    expected = np.einsum("tia,ij,tjb->tab", basis, sym_a, basis)
    gap = np.abs(field.tensors - expected).max()
    elapsed = time.perf_counter() - t0
    assert gap < 1e-8
    assert elapsed < 5.0
    print(f"[accept 01] patch test on {mesh.n_elements} tets: "
          f"max strain gap {gap:.2e}, {elapsed:.2f} s")


def test_02_pcg_matches_dense_on_random_systems():
    mesh = build_phantom(PhantomSpec(
        width_mm=6.0, depth_mm=6.0, vertebra_height_mm=4.0, pot_height_mm=2.0,
        n_vertebrae=1, nx=1, ny=1, nz_vertebra=1, nz_pot=1))
    assert 3 * mesh.n_nodes <= 300
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(20 + seed)
        m = mesh.n_elements
        materials = MaterialField(
            e_mpa=rng.uniform(500.0, 15000.0, m),
            nu=rng.uniform(0.0, 0.45, m),
            provenance=np.full(m, int(Provenance.MAPPED), dtype=np.int8),
            parts=mesh.parts.copy())
        system = assemble(mesh, materials)
        system.f[:] = rng.normal(0.0, 1.0, system.f.shape)
        picks = rng.choice(mesh.n_nodes, 10, replace=False)
        bcs = BoundaryConditionSet(
            fixed=picks[:5], prescribed_nodes=picks[5:],
            prescribed_values=rng.normal(0.0, 1e-3, (5, 3)))
        reduced = apply_bcs(system, bcs, mesh)
        u, stats = solve_pcg(reduced, tol=1e-9)
        dense = np.linalg.solve(reduced.k_ff.toarray(), reduced.rhs)
        gap = np.linalg.norm(u.ravel()[reduced.free] - dense) / np.linalg.norm(dense)
        worst = max(worst, gap)
        assert 0 < stats.iterations <= reduced.rhs.size
        assert gap <= 1e-8
    print(f"[accept 02] pcg vs dense on 5 systems of {3 * mesh.n_nodes} DOFs: "
          f"worst relative gap {worst:.2e}")


def test_03_uniaxial_bar_reaction():
    spec = PhantomSpec(width_mm=10.0, depth_mm=10.0, vertebra_height_mm=40.0,
                       pot_height_mm=10.0, n_vertebrae=1,
                       nx=2, ny=2, nz_vertebra=8, nz_pot=2)
    mesh = build_phantom(spec)
    height = 60.0
    eps = 1e-3
    want = 5000.0 * 100.0 * eps
    z = mesh.nodes[:, 2]
    bottom = np.flatnonzero(np.isclose(z, 0.0))
    top = np.flatnonzero(np.isclose(z, height))
    motion = RigidMotion(np.eye(3), [0.0, 0.0, -eps * height])

    rels = {}
    for nu, limit in ((0.3, 2e-2), (0.0, 1e-6)):
        system = apply_bcs(
            assemble(mesh, uniform_materials(mesh, 5000.0, nu)),
            BoundaryConditionSet(fixed=bottom, driven=top, motion=motion),
            mesh)
        u, _ = solve_pcg(system, tol=1e-12)
        fz = reaction_force(system, u, top)[2]
        rels[nu] = abs(abs(fz) - want) / want
        assert rels[nu] < limit
    print(f"[accept 03] bar reaction vs E*A*eps: nu=0.3 off by "
          f"{rels[0.3]:.2%} (clamped ends), nu=0 off by {rels[0.0]:.1e}")


def test_04_rigid_fit_recovery_and_noise_floor():
    rng = np.random.default_rng(4)
    worst_angle = worst_shift = 0.0
    for _ in range(1000):
        n = int(rng.integers(4, 40))
        src = rng.uniform(-10.0, 10.0, (n, 3))
        truth = RigidMotion.about_axis(
            rng.normal(size=3), rng.uniform(0.0, 180.0),
            pivot=rng.uniform(-5.0, 5.0, 3),
            extra_translation=rng.uniform(-2.0, 2.0, 3))
        fit, _ = fit_rigid_motion(src, truth.apply(src))
        gap = fit.rotation @ truth.rotation.T - np.eye(3)
        # 2 asin(|R - I|_F / (2 sqrt 2)) stays conditioned near zero,
        # unlike the arccos-of-trace form
        angle = np.degrees(2.0 * np.arcsin(
            min(1.0, np.linalg.norm(gap) / (2.0 * np.sqrt(2.0)))))
        worst_angle = max(worst_angle, angle)
        worst_shift = max(worst_shift, np.linalg.norm(
            fit.translation - truth.translation))
    assert worst_angle < 1e-9
    assert worst_shift < 1e-9

    sq = []
    sigma = 0.025
    for seed in range(100):
        r = np.random.default_rng(1000 + seed)
        src = r.uniform(-15.0, 15.0, (60, 3))
        truth = RigidMotion.about_axis(r.normal(size=3), r.uniform(0.0, 30.0),
                                       pivot=r.uniform(-5.0, 5.0, 3))
        dst = truth.apply(src) + r.normal(0.0, sigma, src.shape)
        _, rms = fit_rigid_motion(src, dst)
        sq.append(rms * rms)
    overall = float(np.sqrt(np.mean(sq)))
    assert 0.8 * sigma <= overall <= 1.2 * sigma
    print(f"[accept 04] 1000 exact fits: worst angle {worst_angle:.1e} deg, "
          f"worst shift {worst_shift:.1e} mm; 25 um noise -> rms "
          f"{overall * 1e3:.1f} um")


def test_05_idw_contract():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                    [0.0, 1.0, 0.0], [5.0, 5.0, 0.0]])
    vals = np.array([[1.0], [4.0], [9.0], [16.0]])
    cloud = MeasurementCloud(pts, vals)

    got, missing = idw_interpolate(cloud, pts)
    assert (got == vals).all() and not missing.any()

    const = MeasurementCloud(pts, np.full((4, 1), 7.25))
    queries = np.array([[0.3, 0.2, 0.1], [0.9, 0.1, 0.0], [5.4, 4.9, 0.3]])
    got, missing = idw_interpolate(const, queries)
    assert not missing.any()
    assert np.allclose(got, 7.25, rtol=1e-12, atol=0.0)

    got, missing = idw_interpolate(cloud, np.array([[5.0, 6.0, 0.0]]))
    assert not missing[0] and got[0, 0] == 16.0
    got, missing = idw_interpolate(cloud, np.array([[5.0, 6.0 + 1e-9, 0.0]]))
    assert missing[0] and np.isnan(got[0, 0])

    gx, gy = np.meshgrid(np.linspace(-2.0, 7.0, 25), np.linspace(-2.0, 7.0, 25))
    queries = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    got, missing = idw_interpolate(cloud, queries)
    dmin = np.min(np.linalg.norm(queries[:, None] - pts[None], axis=2), axis=1)
    assert (missing == (dmin > 1.0)).all()
    assert np.isnan(got[missing]).all()
    assert np.isfinite(got[~missing]).all()
    assert got[~missing, 0].min() >= 1.0 - 1e-12
    assert got[~missing, 0].max() <= 16.0 + 1e-12
    print(f"[accept 05] idw contract on {queries.shape[0]} grid queries: "
          f"{int(missing.sum())} correctly flagged outside the 1 mm radius")


def test_06_metric_oracles():
    stats = linear_regression(np.array([1.0, 2.0, 3.0]),
                              np.array([1.0, 3.0, 4.0]))
    assert abs(stats.slope - 1.5) < 1e-12
    assert abs(stats.intercept + 1.0 / 3.0) < 1e-12
    assert abs(stats.r2 - 27.0 / 28.0) < 1e-12

    d, _ = ks_two_sample(np.array([1.0, 2.0, 3.0, 4.0]),
                         np.array([2.0, 3.0, 4.0, 5.0]))
    assert d == 0.25
    d, _ = ks_two_sample(np.arange(9.0), np.arange(9.0))
    assert d == 0.0
    print("[accept 06] regression and ks oracles match to 1e-12 / exactly")


def test_07_closed_loop_agreement_at_scale():
    t0 = time.perf_counter()
    cfg = load_config(large_config())
    model = build_model(cfg)
    dofs = 3 * model.mesh.n_nodes
    assert 40_000 <= dofs <= 60_000
    entry = solve_entry(model, 10.0)
    assert entry.ok, entry.error

    clean = synth_measurement(
        model.observed, entry.disp, SyntheticSpec(2.0, 0.0, 0.0),
        np.random.default_rng(np.random.SeedSequence([cfg.seed, 0])))
    report = compare_fields(clean, model.observed, entry.disp, model.rois)
    elapsed = time.perf_counter() - t0

    pooled = report.displacement["pooled"]
    assert pooled.rmse_pct is not None and pooled.rmse_pct < 0.5
    for quantity in ("eps_max", "eps_min"):
        block = report.strain_block("all", quantity)
        total = block.per_roi["total"]
        assert total.regression is not None and total.regression.r2 > 0.999
        assert block.ks_d < 0.01
    assert elapsed < 120.0

    noisy = synth_measurement(
        model.observed, entry.disp, SyntheticSpec(2.0, 10.0, 25.0),
        np.random.default_rng(np.random.SeedSequence([cfg.seed, 1])))
    peak = float(np.abs(noisy.values).max())
    assert peak >= 0.3
    noisy_pct = compare_fields(noisy, model.observed, entry.disp,
                               model.rois).displacement["pooled"].rmse_pct
    assert noisy_pct is not None and noisy_pct < 9.0
    print(f"[accept 07] closed loop at {dofs} DOFs in {elapsed:.1f} s: "
          f"clean %RMSE {pooled.rmse_pct:.3g}, noisy %RMSE {noisy_pct:.3g} "
          f"(peak {peak:.2f} mm)")


def test_08_strains_and_reaction_grow_with_disc_modulus(trend_sweep):
    moduli = [e.e_disc_mpa for e in trend_sweep.entries]
    assert moduli == SWEEP_E_DISC
    mean_abs_min = [float(np.abs(e.strains.eps_min_ue).mean())
                    for e in trend_sweep.entries]
    mean_max = [float(e.strains.eps_max_ue.mean()) for e in trend_sweep.entries]
    reactions = [e.reaction_mag_n for e in trend_sweep.entries]
    assert (np.diff(mean_abs_min) > 0.0).all()
    assert (np.diff(mean_max) > 0.0).all()
    assert (np.diff(reactions) > 0.0).all()
    print(f"[accept 08] sweep {moduli} MPa: mean |eps_min| "
          f"{mean_abs_min[0]:.0f} -> {mean_abs_min[-1]:.0f} ue, reaction "
          f"{reactions[0]:.0f} -> {reactions[-1]:.0f} N, all strictly rising")


def test_09_strain_pattern_invariant_across_sweep(trend_sweep):
    r_min = 1.0
    for attr in ("eps_max_ue", "eps_min_ue"):
        fields = [getattr(e.strains, attr) for e in trend_sweep.entries]
        for i in range(len(fields)):
            for j in range(i + 1, len(fields)):
                a = fields[i] / fields[i].mean()
                b = fields[j] / fields[j].mean()
                r_min = min(r_min, float(np.corrcoef(a, b)[0, 1]))
    assert r_min > 0.99
    print(f"[accept 09] per-triangle strain fields across the sweep: "
          f"min pairwise pearson r {r_min:.5f}")


def test_10_disc_modulus_recovered_from_force():
    cfg = load_config(trend_config())
    target = solve_entry(build_model(cfg), 25.0).reaction_mag_n
    e_star, solves = fit_disc_to_force(cfg, target, (5.0, 60.0), tol_rel=1e-4)
    rel = abs(e_star - 25.0) / 25.0
    assert solves <= 30
    assert rel < 5e-3
    print(f"[accept 10] fit to {target:.1f} N: e_disc {e_star:.4f} MPa in "
          f"{solves} solves (off by {rel:.2e})")


def test_11_reports_byte_identical_across_thread_counts(tmp_path):
    outs = {}
    for threads in (1, 8):
        cfg = load_config(trend_config())
        cfg.threads = threads
        result = run_sweep(cfg)
        outdir = tmp_path / f"threads_{threads}"
        emit_reports(result, outdir)
        outs[threads] = outdir
    names = ["summary.csv", "curves.csv", "sweep_result.json"]
    names += [f"e_disc_{e:g}/report.json" for e in SWEEP_E_DISC]
    for name in names:
        assert (outs[1] / name).read_bytes() == (outs[8] / name).read_bytes(), name
    print(f"[accept 11] {len(names)} report files byte-identical at "
          f"1 and 8 threads")
