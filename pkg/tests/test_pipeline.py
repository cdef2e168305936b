import json

import numpy as np
import pytest
from scipy.spatial import cKDTree

import spinefe.pipeline as pipeline
from spinefe.errors import ConfigError, MeshError, SolverError
from spinefe.io import write_cloud
from spinefe.materials import Provenance
from spinefe.mesh import PartRole
from spinefe.pipeline import (LoadCase, SyntheticSpec, build_flexion_motion,
                              build_materials, build_model, emit_reports,
                              fit_disc_to_force, load_config,
                              mesh_from_config, reemit_tables, run_sweep,
                              solve_entry, synth_measurement, write_tables)
from spinefe.registration import rotation_angle


def tiny_config(**over):
    cfg = {
        "phantom": {"width_mm": 6.0, "depth_mm": 6.0,
                    "vertebra_height_mm": 4.0, "disc_height_mm": 2.0,
                    "pot_height_mm": 2.0, "n_vertebrae": 2,
                    "nx": 3, "ny": 3, "nz_vertebra": 2, "nz_disc": 1,
                    "nz_pot": 1},
        "constant_hu": 800.0,
        "sweep_e_disc_mpa": [10.0, 25.0],
        "synthetic": {"spacing_mm": 1.0, "systematic_um": 0.0,
                      "random_um": 0.0},
        "loading": {"flexion_angle_deg": 1.0, "compression_mm": 0.2},
        "seed": 3,
    }
    cfg.update(over)
    return cfg


class TestLoadConfig:
    def test_dict_and_file_sources_agree(self, tmp_path):
        data = tiny_config()
        from_dict = load_config(data)
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(data))
        from_file = load_config(p)
        assert from_file == from_dict

    def test_defaults_applied(self):
        cfg = load_config(tiny_config())
        assert cfg.nu_disc == 0.45
        assert cfg.e_pot_mpa == 2500.0
        assert cfg.integration_order == 2
        assert cfg.comparison.idw_radius_mm == 1.0

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            load_config(tiny_config(basis="tet4"))

    def test_unknown_section_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown keys in 'loading'"):
            load_config(tiny_config(loading={"angle": 3.0}))

    def test_mesh_and_phantom_mutually_exclusive(self):
        with pytest.raises(ConfigError, match="mutually exclusive"):
            load_config(tiny_config(mesh_path="mesh.txt"))
        cfg = tiny_config()
        del cfg["phantom"]
        with pytest.raises(ConfigError, match="mesh_path or a phantom"):
            load_config(cfg)

    def test_bad_json_file_rejected(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text("{broken")
        with pytest.raises(ConfigError, match="valid JSON"):
            load_config(p)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.json")

    def test_roi_fields_coerced_to_tuples(self):
        cfg = load_config(tiny_config(roi_axis=[0.0, 1.0, 0.0],
                                      roi_fractions=[0.25, 0.75]))
        assert cfg.roi_axis == (0.0, 1.0, 0.0)
        assert cfg.roi_fractions == (0.25, 0.75)

    def test_sweep_validation(self):
        with pytest.raises(ConfigError, match="must not be empty"):
            load_config(tiny_config(sweep_e_disc_mpa=[]))
        with pytest.raises(ConfigError, match="positive"):
            load_config(tiny_config(sweep_e_disc_mpa=[10.0, -1.0]))

    def test_integration_order_validated(self):
        with pytest.raises(ConfigError, match="integration_order"):
            load_config(tiny_config(integration_order=3))

    def test_threads_validated(self):
        with pytest.raises(ConfigError, match="threads"):
            load_config(tiny_config(threads=0))

    def test_synthetic_spec_validated(self):
        with pytest.raises(ConfigError, match="spacing_mm"):
            load_config(tiny_config(synthetic={"spacing_mm": 0.0}))


class TestFlexionMotion:
    def test_pivot_oracle(self):
        cfg = load_config(tiny_config())
        mesh = mesh_from_config(cfg)
        load = LoadCase(flexion_angle_deg=2.0, compression_mm=0.3,
                        offset_fraction=0.10)
        motion = build_flexion_motion(mesh, load)
        # single disc band: x, y in [0, 6], z in [6, 8]; box center
        # (3, 3, 7) shifted +0.6 in y by the 10% offset
        pivot = np.array([3.0, 3.6, 7.0])
        assert np.allclose(motion.apply(pivot), pivot + [0.0, 0.0, -0.3],
                           atol=1e-12)
        assert rotation_angle(motion) == pytest.approx(2.0, abs=1e-10)

    def test_axis_respected(self):
        cfg = load_config(tiny_config())
        mesh = mesh_from_config(cfg)
        motion = build_flexion_motion(mesh, LoadCase(axis=(0.0, 1.0, 0.0),
                                                     compression_mm=0.0))
        # rotation about y leaves the y axis invariant
        assert np.allclose(motion.rotation @ [0.0, 1.0, 0.0], [0.0, 1.0, 0.0],
                           atol=1e-12)


class TestMeshFromConfig:
    def test_edge_audit_rejects_coarse_mesh(self):
        cfg = load_config(tiny_config(max_edge_mm=1.0))
        with pytest.raises(MeshError, match="exceed max edge"):
            mesh_from_config(cfg)

    def test_edge_audit_passes_within_limit(self):
        cfg = load_config(tiny_config(max_edge_mm=4.0))
        mesh = mesh_from_config(cfg)
        assert mesh.n_elements > 0

    def test_mesh_file_source(self, tmp_path):
        from spinefe.io import write_mesh
        mesh = mesh_from_config(load_config(tiny_config()))
        p = tmp_path / "mesh.txt"
        write_mesh(mesh, p)
        cfg = tiny_config(mesh_path=str(p))
        del cfg["phantom"]
        back = mesh_from_config(load_config(cfg))
        assert back.nodes.tobytes() == mesh.nodes.tobytes()


class TestBuildMaterials:
    def test_provenance_and_uniform_hu_modulus(self):
        cfg = load_config(tiny_config())
        mesh = mesh_from_config(cfg)
        mats = build_materials(cfg, mesh)
        roles = np.array([mesh.part_table[int(p)].role
                          for p in mats.parts])
        assert (mats.provenance[roles == PartRole.VERTEBRA]
                == Provenance.MAPPED).all()
        assert (mats.provenance[roles == PartRole.POT]
                == Provenance.UNIFORM).all()
        assert (mats.provenance[roles == PartRole.DISC]
                == Provenance.UNSET).all()
        rho = 1e-3 * 800.0
        e_want = 4730.0 * rho ** 1.56
        vert = roles == PartRole.VERTEBRA
        assert np.allclose(mats.e_mpa[vert], e_want, rtol=1e-5)
        assert np.allclose(mats.nu[vert], cfg.nu_bone)
        pot = roles == PartRole.POT
        assert np.allclose(mats.e_mpa[pot], 2500.0)


class TestBuildModel:
    def setup_method(self):
        self.cfg = load_config(tiny_config())
        self.model = build_model(self.cfg)

    def test_constraint_sets_disjoint_and_placed(self):
        m = self.model
        z = m.mesh.nodes[:, 2]
        assert np.intersect1d(m.fixed_nodes, m.driven_nodes).size == 0
        # every node on the extreme faces is constrained
        assert np.isin(np.flatnonzero(np.isclose(z, z.min())),
                       m.fixed_nodes).all()
        assert np.isin(np.flatnonzero(np.isclose(z, z.max())),
                       m.driven_nodes).all()
        # driven nodes live on the superior pot band (z in [12, 14])
        assert (z[m.driven_nodes] >= 12.0 - 1e-12).all()
        assert (z[m.fixed_nodes] <= 2.0 + 1e-12).all()

    def test_observed_surface_is_vertebra_only(self):
        m = self.model
        roles = {m.mesh.part_table[int(p)].role for p in m.observed.tri_parts}
        assert roles == {PartRole.VERTEBRA}
        assert m.rois.labels.shape == (m.observed.n_triangles,)

    def test_disc_parts_recorded_and_unset(self):
        m = self.model
        assert len(m.disc_part_ids) == 1
        gaps = m.materials.coverage_gaps()
        disc_elems = np.flatnonzero(np.isin(m.mesh.parts, m.disc_part_ids))
        assert sorted(gaps) == sorted(disc_elems)

    def test_disc_required(self):
        cfg = tiny_config()
        cfg["phantom"]["n_vertebrae"] = 1  # single vertebra: no disc band
        with pytest.raises(MeshError, match="no disc part"):
            build_model(load_config(cfg))


class TestSynthMeasurement:
    def setup_method(self):
        self.model = build_model(load_config(tiny_config()))
        self.entry = solve_entry(self.model, 25.0)
        assert self.entry.ok, self.entry.error

    def test_corner_nodes_lead_with_exact_values(self):
        spec = SyntheticSpec(spacing_mm=1.0, systematic_um=0.0, random_um=0.0)
        rng = np.random.default_rng(0)
        cloud = synth_measurement(self.model.observed, self.entry.disp, spec, rng)
        ids = self.model.observed.corner_node_ids()
        assert cloud.points[:ids.size].tobytes() == \
            self.model.mesh.nodes[ids].tobytes()
        assert cloud.values[:ids.size].tobytes() == \
            self.entry.disp[ids].tobytes()

    def test_spacing_respected(self):
        spec = SyntheticSpec(spacing_mm=1.5, systematic_um=0.0, random_um=0.0)
        rng = np.random.default_rng(1)
        cloud = synth_measurement(self.model.observed, self.entry.disp, spec, rng)
        d, _ = cKDTree(cloud.points).query(cloud.points, k=2)
        assert d[:, 1].min() >= 1.5 - 1e-12

    def test_deterministic_per_seed(self):
        spec = SyntheticSpec(spacing_mm=1.0, systematic_um=10.0, random_um=25.0)
        c1 = synth_measurement(self.model.observed, self.entry.disp, spec,
                               np.random.default_rng(5))
        c2 = synth_measurement(self.model.observed, self.entry.disp, spec,
                               np.random.default_rng(5))
        c3 = synth_measurement(self.model.observed, self.entry.disp, spec,
                               np.random.default_rng(6))
        assert c1.values.tobytes() == c2.values.tobytes()
        assert c1.values.tobytes() != c3.values.tobytes()

    def test_noise_magnitudes_plausible(self):
        spec = SyntheticSpec(spacing_mm=1.0, systematic_um=0.0, random_um=25.0)
        clean = SyntheticSpec(spacing_mm=1.0, systematic_um=0.0, random_um=0.0)
        noisy = synth_measurement(self.model.observed, self.entry.disp, spec,
                                  np.random.default_rng(7))
        base = synth_measurement(self.model.observed, self.entry.disp, clean,
                                 np.random.default_rng(7))
        delta = noisy.values - base.values
        assert 0.015 < delta.std() < 0.035  # 25 um = 0.025 mm


class TestSolveEntry:
    def setup_method(self):
        self.model = build_model(load_config(tiny_config()))

    def test_successful_entry(self):
        entry = solve_entry(self.model, 25.0)
        assert entry.ok and entry.error is None
        assert entry.reaction_mag_n > 0.0
        assert entry.angle_deg == pytest.approx(1.0, abs=1e-9)
        assert np.isfinite(entry.disp).all()
        assert entry.strains.n_triangles > 0
        assert entry.strain_summary["total"]["n"] > 0
        assert entry.stats.iterations > 0
        assert entry.report is None

    def test_prescribed_motion_exact_on_driven_nodes(self):
        entry = solve_entry(self.model, 25.0)
        want = self.model.motion.small_displacement(
            self.model.mesh.nodes[self.model.driven_nodes])
        assert np.allclose(entry.disp[self.model.driven_nodes], want, atol=0.0)
        assert (entry.disp[self.model.fixed_nodes] == 0.0).all()

    def test_stiffer_disc_raises_reaction(self):
        soft = solve_entry(self.model, 5.0)
        stiff = solve_entry(self.model, 50.0)
        assert soft.ok and stiff.ok
        assert stiff.reaction_mag_n > soft.reaction_mag_n

    def test_failure_is_contained(self):
        cfg = load_config(tiny_config(solver={"max_iter": 1}))
        model = build_model(cfg)
        entry = solve_entry(model, 25.0)
        assert not entry.ok
        assert entry.error.startswith("convergence:")
        assert entry.disp is None

    def test_comparison_attached(self):
        entry0 = solve_entry(self.model, 25.0)
        spec = SyntheticSpec(spacing_mm=1.0, systematic_um=0.0, random_um=0.0)
        cloud = synth_measurement(self.model.observed, entry0.disp, spec,
                                  np.random.default_rng(8))
        entry = solve_entry(self.model, 25.0, compare_cloud=cloud)
        assert entry.ok
        assert entry.report.displacement["pooled"].rmse == 0.0
        blk = entry.report.strain_block("all", "eps_max")
        assert blk.ks_d == 0.0


class TestObtainCloud:
    def test_file_source(self, tmp_path):
        model = build_model(load_config(tiny_config()))
        entry = solve_entry(model, 10.0)
        spec = SyntheticSpec(spacing_mm=1.0, systematic_um=0.0, random_um=0.0)
        cloud = synth_measurement(model.observed, entry.disp, spec,
                                  np.random.default_rng(9))
        p = tmp_path / "cloud.csv"
        write_cloud(cloud, p)
        cfg = load_config(tiny_config(measurement_path=str(p), synthetic=None))
        model2 = build_model(cfg)
        got, source = pipeline._obtain_cloud(model2)
        assert source == f"file:{p}"
        assert got.points.tobytes() == cloud.points.tobytes()

    def test_synthetic_defaults_to_first_sweep_value(self):
        model = build_model(load_config(tiny_config()))
        _, source = pipeline._obtain_cloud(model)
        assert source == "synthetic:e_disc=10"

    def test_synthetic_reference_override(self):
        cfg = tiny_config()
        cfg["synthetic"]["reference_e_disc_mpa"] = 25.0
        model = build_model(load_config(cfg))
        _, source = pipeline._obtain_cloud(model)
        assert source == "synthetic:e_disc=25"

    def test_neither_source_rejected(self):
        model = build_model(load_config(tiny_config(synthetic=None)))
        with pytest.raises(ConfigError, match="measurement_path or a synthetic"):
            pipeline._obtain_cloud(model)


class TestRunSweep:
    def test_smoke(self):
        result = run_sweep(load_config(tiny_config()))
        assert [e.e_disc_mpa for e in result.entries] == [10.0, 25.0]
        assert all(e.ok for e in result.entries)
        assert all(e.report is not None for e in result.entries)
        assert result.measurement_source == "synthetic:e_disc=10"
        # the 10 MPa entry reproduces the zero-noise reference cloud
        assert result.entries[0].report.displacement["pooled"].rmse == 0.0

    def test_reaction_monotone_in_disc_modulus(self):
        cfg = load_config(tiny_config(sweep_e_disc_mpa=[4.0, 12.0, 36.0]))
        result = run_sweep(cfg)
        mags = [e.reaction_mag_n for e in result.entries]
        assert mags[0] < mags[1] < mags[2]

    def test_threads_do_not_change_results(self, tmp_path):
        r1 = run_sweep(load_config(tiny_config(threads=1)))
        r2 = run_sweep(load_config(tiny_config(threads=2)))
        d1 = tmp_path / "t1"
        d2 = tmp_path / "t2"
        emit_reports(r1, d1)
        emit_reports(r2, d2)
        for name in ("summary.csv", "curves.csv", "sweep_result.json"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    def test_one_failing_entry_does_not_stop_others(self, monkeypatch):
        cfg = load_config(tiny_config(sweep_e_disc_mpa=[10.0, 20.0, 30.0]))
        original = pipeline.solve_pcg
        calls = []

        def flaky(system, tol=1e-9, max_iter=None):
            calls.append(1)
            if len(calls) == 3:  # reference solve is call 1
                raise SolverError("injected failure")
            return original(system, tol=tol, max_iter=max_iter)

        monkeypatch.setattr(pipeline, "solve_pcg", flaky)
        result = run_sweep(cfg)
        oks = [e.ok for e in result.entries]
        assert oks == [True, False, True]
        assert result.entries[1].error == "solver: injected failure"


class TestReports:
    def setup_method(self):
        self.result = run_sweep(load_config(tiny_config()))

    def test_emit_reports_writes_expected_tree(self, tmp_path):
        emit_reports(self.result, tmp_path)
        assert (tmp_path / "summary.csv").exists()
        assert (tmp_path / "curves.csv").exists()
        assert (tmp_path / "sweep_result.json").exists()
        for e in (10, 25):
            edir = tmp_path / f"e_disc_{e}"
            for name in ("displacements.csv", "strains.csv", "report.json",
                         "solution.vtk", "surface_strains.vtk"):
                assert (edir / name).exists(), f"{edir / name}"

    def test_summary_table_contents(self, tmp_path):
        import csv
        emit_reports(self.result, tmp_path)
        with (tmp_path / "summary.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["statistic", "e_disc_mpa", "part", "quantity",
                           "left", "central", "right", "total"]
        stats = {r[0] for r in rows[1:]}
        assert {"reaction_mag_n", "flexion_angle_deg", "rmse_mm",
                "rmse_ue", "ks_d", "mean_meas_ue"} <= stats
        reaction_rows = [r for r in rows if r[0] == "reaction_mag_n"]
        assert [r[1] for r in reaction_rows] == ["10", "25"]

    def test_curves_table_contents(self, tmp_path):
        emit_reports(self.result, tmp_path)
        lines = (tmp_path / "curves.csv").read_text().splitlines()
        assert lines[0].startswith("e_disc_mpa,eps_max_rmse_pct_left")
        assert len(lines) == 3
        first = lines[1].split(",")
        assert first[0] == "10"
        # reference entry matches the cloud exactly: all rmse_pct are 0
        assert all(v == "0" for v in first[1:])

    def test_sweep_json_round_trips(self, tmp_path):
        emit_reports(self.result, tmp_path)
        data = json.loads((tmp_path / "sweep_result.json").read_text())
        assert data["sweep_e_disc_mpa"] == [10.0, 25.0]
        assert data["seed"] == 3
        assert len(data["entries"]) == 2
        assert data["entries"][0]["ok"] is True

    def test_reemit_tables_is_lossless(self, tmp_path):
        d1 = tmp_path / "a"
        d2 = tmp_path / "b"
        emit_reports(self.result, d1)
        reemit_tables(d1 / "sweep_result.json", d2)
        assert (d1 / "summary.csv").read_bytes() == \
            (d2 / "summary.csv").read_bytes()
        assert (d1 / "curves.csv").read_bytes() == \
            (d2 / "curves.csv").read_bytes()

    def test_reemit_rejects_bad_input(self, tmp_path):
        bad = tmp_path / "sweep.json"
        bad.write_text("{}")
        with pytest.raises(ConfigError, match="entries"):
            reemit_tables(bad, tmp_path)
        with pytest.raises(ConfigError, match="cannot read"):
            reemit_tables(tmp_path / "missing.json", tmp_path)

    def test_error_entries_recorded_in_summary(self, tmp_path):
        dicts = [e.summary_dict() for e in self.result.entries]
        dicts.append({"e_disc_mpa": 99.0, "ok": False,
                      "error": "solver: boom"})
        write_tables(dicts, tmp_path)
        text = (tmp_path / "summary.csv").read_text()
        assert "error,99" in text
        assert "solver: boom" in text
        # failing entries contribute no curve rows
        lines = (tmp_path / "curves.csv").read_text().splitlines()
        assert len(lines) == 3

    def test_repeated_sweeps_identical(self, tmp_path):
        other = run_sweep(load_config(tiny_config()))
        d1, d2 = tmp_path / "x", tmp_path / "y"
        emit_reports(self.result, d1)
        emit_reports(other, d2)
        assert (d1 / "sweep_result.json").read_bytes() == \
            (d2 / "sweep_result.json").read_bytes()


class TestFitDiscToForce:
    def test_recovers_target_modulus(self):
        cfg = load_config(tiny_config())
        model = build_model(cfg)
        target = solve_entry(model, 25.0).reaction_mag_n
        e_star, solves = fit_disc_to_force(cfg, target, (5.0, 60.0),
                                           tol_rel=1e-6)
        assert e_star == pytest.approx(25.0, rel=5e-3)
        assert solves <= 30
