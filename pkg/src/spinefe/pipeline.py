"""End-to-end pipeline: config -> mesh -> materials -> solves -> reports.

A single JSON config describes the specimen (phantom spec or mesh file),
the CT grid, the loading, the disc-modulus sweep, and the comparison
settings.  ``run_sweep`` solves every disc modulus against one measured
(or synthetic) displacement cloud; ``emit_reports`` writes the artifacts.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import io as sfio
from .errors import ConfigError, MeshError, SpineFEError
from .materials import (CalibrationLaw, DensityElasticityLaw, MaterialField,
                        VoxelGrid, assign_uniform, map_materials)
from .mesh import (Mesh, PartRole, PhantomSpec, RoIPartition, SurfaceMesh,
                   build_phantom, check_edge_lengths, extract_surface,
                   face_node_ids, partition_rois)
from .metrics import ComparisonReport, MeasurementCloud, compare_fields, roi_average
from .registration import RigidMotion, rotation_angle
from .solver import (BoundaryConditionSet, ElasticitySystem, SolveStats,
                     apply_bcs, assemble, fit_disc_modulus, reaction_force,
                     solve_pcg)
from .strain import SurfaceStrainField, surface_strain_field

__all__ = [
    "PipelineConfig",
    "SyntheticSpec",
    "LoadCase",
    "load_config",
    "build_flexion_motion",
    "synth_measurement",
    "PipelineModel",
    "mesh_from_config",
    "build_materials",
    "build_model",
    "solve_entry",
    "SweepEntry",
    "SweepResult",
    "run_sweep",
    "emit_reports",
    "write_tables",
    "reemit_tables",
    "fit_disc_to_force",
]

DEFAULT_SWEEP_MPA = [4.15, 10.0, 25.0, 30.0, 35.0, 50.0]


@dataclass
class LoadCase:
    """Rigid driving of the superior pot: flexion plus axial compression."""

    flexion_angle_deg: float = 2.8
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    compression_mm: float = 0.5
    offset_fraction: float = 0.10


@dataclass
class SyntheticSpec:
    """Synthetic displacement cloud: sampling density and error model."""

    spacing_mm: float = 2.0
    systematic_um: float = 10.0
    random_um: float = 25.0
    reference_e_disc_mpa: float | None = None

    def __post_init__(self) -> None:
        if self.spacing_mm <= 0.0:
            raise ConfigError("synthetic.spacing_mm must be positive")
        if self.systematic_um < 0.0 or self.random_um < 0.0:
            raise ConfigError("synthetic error magnitudes must be >= 0")


@dataclass
class ComparisonSettings:
    idw_power: float = 2.0
    idw_radius_mm: float = 1.0
    pct_diff_floor_ue: float = 10.0
    area_weighted: bool = False
    min_points: int = 10


@dataclass
class SolverSettings:
    tol: float = 1e-9
    max_iter: int | None = None


@dataclass
class PipelineConfig:
    output_dir: str = "out"
    mesh_path: str | None = None
    phantom: PhantomSpec | None = None
    voxel_grid_path: str | None = None
    constant_hu: float | None = None
    markers_path: str | None = None
    measurement_path: str | None = None
    calibration: CalibrationLaw = dc_field(default_factory=CalibrationLaw)
    elasticity: DensityElasticityLaw = dc_field(default_factory=DensityElasticityLaw)
    integration_order: int = 2
    nu_bone: float = 0.3
    nu_disc: float = 0.45
    e_pot_mpa: float = 2500.0
    nu_pot: float = 0.3
    sweep_e_disc_mpa: list[float] = dc_field(default_factory=lambda: list(DEFAULT_SWEEP_MPA))
    loading: LoadCase = dc_field(default_factory=LoadCase)
    comparison: ComparisonSettings = dc_field(default_factory=ComparisonSettings)
    solver: SolverSettings = dc_field(default_factory=SolverSettings)
    synthetic: SyntheticSpec | None = None
    roi_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    roi_fractions: tuple[float, float] = (1.0 / 3.0, 2.0 / 3.0)
    max_edge_mm: float | None = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.mesh_path is None and self.phantom is None:
            raise ConfigError("config needs either mesh_path or a phantom block")
        if self.mesh_path is not None and self.phantom is not None:
            raise ConfigError("mesh_path and phantom are mutually exclusive")
        if not self.sweep_e_disc_mpa:
            raise ConfigError("sweep_e_disc_mpa must not be empty")
        if any(e <= 0.0 for e in self.sweep_e_disc_mpa):
            raise ConfigError("sweep moduli must be positive")
        if self.integration_order not in (1, 2):
            raise ConfigError("integration_order must be 1 or 2")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


def _build_section(data: dict, cls, name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    names = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from None


def load_config(source) -> PipelineConfig:
    """Build a validated PipelineConfig from a JSON file path or a dict."""
    if isinstance(source, (str, Path)):
        try:
            data = json.loads(Path(source).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    else:
        data = dict(source)
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")

    sections = {
        "phantom": PhantomSpec,
        "calibration": CalibrationLaw,
        "elasticity": DensityElasticityLaw,
        "loading": LoadCase,
        "comparison": ComparisonSettings,
        "solver": SolverSettings,
        "synthetic": SyntheticSpec,
    }
    kwargs = {}
    known = set(PipelineConfig.__dataclass_fields__)
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if key in sections and value is not None:
            kwargs[key] = _build_section(value, sections[key], key)
        else:
            kwargs[key] = value
    for tup_key in ("roi_axis", "roi_fractions"):
        if tup_key in kwargs and kwargs[tup_key] is not None:
            kwargs[tup_key] = tuple(kwargs[tup_key])
    try:
        return PipelineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def build_flexion_motion(mesh: Mesh, load: LoadCase) -> RigidMotion:
    """Driving motion: rotation about a mediolateral axis through a pivot
    anterior to the central disc's center, plus axial compression.

    The pivot sits at the central disc's bounding-box center, shifted
    along +y by ``offset_fraction`` of that part's anteroposterior depth
    (whole-mesh box when there is no disc).
    """
    disc_ids = mesh.part_ids_with_role(PartRole.DISC)
    if disc_ids:
        pid = disc_ids[len(disc_ids) // 2]
        pts = mesh.nodes[np.unique(mesh.elements[mesh.parts == pid])]
    else:
        pts = mesh.nodes
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pivot = 0.5 * (lo + hi)
    pivot[1] += load.offset_fraction * (hi[1] - lo[1])
    return RigidMotion.about_axis(load.axis, load.flexion_angle_deg, pivot=pivot,
                                  extra_translation=(0.0, 0.0, -load.compression_mm))


def synth_measurement(surface: SurfaceMesh, disp: np.ndarray, spec: SyntheticSpec,
                      rng: np.random.Generator) -> MeasurementCloud:
    """Synthesize a measured displacement cloud from a solved field.

    Candidate points are the surface corner nodes (exact nodal values)
    followed by area-stratified random points on the triangles; the list
    is thinned to the target spacing keeping earlier candidates, then
    corrupted with one systematic offset (a random direction drawn once)
    and independent isotropic Gaussian noise.
    """
    disp = np.asarray(disp, dtype=np.float64)
    node_ids = surface.corner_node_ids()
    pts = [surface.mesh.nodes[node_ids]]
    vals = [disp[node_ids]]

    tri = surface.vertex_coords()
    tri_disp = disp[surface.triangles]
    counts = np.ceil(2.0 * surface.areas / spec.spacing_mm ** 2).astype(int)
    for t in range(surface.n_triangles):
        c = counts[t]
        if c <= 0:
            continue
        r1 = np.sqrt(rng.random(c))
        r2 = rng.random(c)
        bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
        pts.append(bary @ tri[t])
        vals.append(bary @ tri_disp[t])
    points = np.vstack(pts)
    values = np.vstack(vals)

    keep = _thin_by_spacing(points, spec.spacing_mm)
    points, values = points[keep], values[keep]

    bias_dir = rng.standard_normal(3)
    bias_dir /= np.linalg.norm(bias_dir)
    values = values + (spec.systematic_um * 1e-3) * bias_dir
    values = values + rng.normal(0.0, spec.random_um * 1e-3, values.shape)
    return MeasurementCloud(points=points, values=values)


def _thin_by_spacing(points: np.ndarray, spacing: float) -> np.ndarray:
    """Greedy minimum-distance thinning; earlier points win."""
    cells: dict[tuple[int, int, int], list[int]] = {}
    keep = np.zeros(len(points), dtype=bool)
    inv = 1.0 / spacing
    sq = spacing * spacing
    for i, p in enumerate(points):
        cx, cy, cz = int(np.floor(p[0] * inv)), int(np.floor(p[1] * inv)), int(np.floor(p[2] * inv))
        clash = False
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for j in cells.get((cx + dx, cy + dy, cz + dz), ()):
                        d = points[j] - p
                        if d @ d < sq:
                            clash = True
                            break
                    if clash:
                        break
                if clash:
                    break
            if clash:
                break
        if not clash:
            keep[i] = True
            cells.setdefault((cx, cy, cz), []).append(i)
    return keep


def _subset_surface(surface: SurfaceMesh, mask: np.ndarray) -> SurfaceMesh:
    return SurfaceMesh(mesh=surface.mesh,
                       triangles=surface.triangles[mask],
                       owners=surface.owners[mask],
                       tri_parts=surface.tri_parts[mask],
                       normals=surface.normals[mask],
                       areas=surface.areas[mask],
                       centroids=surface.centroids[mask])


@dataclass
class PipelineModel:
    """Everything that does not depend on the disc modulus."""

    config: PipelineConfig
    mesh: Mesh
    materials: MaterialField          # disc provenance still unset
    k_static: object                  # stiffness of bone + pot elements
    k_disc_unit: object               # stiffness of disc elements at E = 1 MPa
    exterior: SurfaceMesh
    observed: SurfaceMesh             # exterior restricted to vertebra faces
    rois: RoIPartition
    bcs: BoundaryConditionSet
    driven_nodes: np.ndarray
    fixed_nodes: np.ndarray
    motion: RigidMotion
    disc_part_ids: list[int]


def mesh_from_config(config: PipelineConfig) -> Mesh:
    """Phantom-spec or mesh-file geometry, with the optional edge audit."""
    if config.phantom is not None:
        mesh = build_phantom(config.phantom)
    else:
        mesh = sfio.read_mesh(config.mesh_path)
    if config.max_edge_mm is not None:
        bad = check_edge_lengths(mesh, config.max_edge_mm)
        if bad:
            eid, ln = bad[0]
            raise MeshError(f"{len(bad)} elements exceed max edge "
                            f"{config.max_edge_mm} mm (first: element {eid} "
                            f"at {ln:.3f} mm)")
    return mesh


def build_materials(config: PipelineConfig, mesh: Mesh) -> MaterialField:
    """CT-mapped vertebrae plus uniform pots; discs stay unset here."""
    vert_ids = mesh.part_ids_with_role(PartRole.VERTEBRA)
    pot_ids = mesh.part_ids_with_role(PartRole.POT)
    materials = MaterialField.unset_for(mesh)
    if vert_ids:
        grid = _load_grid(config, mesh)
        materials = map_materials(mesh, grid, config.calibration, config.elasticity,
                                  order=config.integration_order, nu=config.nu_bone,
                                  field=materials)
    for pid in pot_ids:
        materials = assign_uniform(materials, pid, config.e_pot_mpa, config.nu_pot)
    return materials


def build_model(config: PipelineConfig) -> PipelineModel:
    """Mesh, materials, constraint sets, and split stiffness matrices."""
    mesh = mesh_from_config(config)

    vert_ids = mesh.part_ids_with_role(PartRole.VERTEBRA)
    disc_ids = mesh.part_ids_with_role(PartRole.DISC)
    pot_ids = mesh.part_ids_with_role(PartRole.POT)
    if len(pot_ids) != 2:
        raise MeshError(f"expected exactly 2 pot parts, found {len(pot_ids)}")
    if not disc_ids:
        raise MeshError("mesh has no disc part to sweep")

    materials = build_materials(config, mesh)

    # the disc block scales linearly with its modulus, so assemble it once
    # at unit stiffness and splice K(E) = K_static + E * K_disc_unit
    disc_unit = materials.copy()
    for pid in disc_ids:
        disc_unit = assign_uniform(disc_unit, pid, 1.0, config.nu_disc)
    static_parts = [p for p in mesh.part_table if p not in disc_ids]
    k_static = assemble(mesh, materials, part_ids=static_parts).k_full
    k_disc_unit = assemble(mesh, disc_unit, part_ids=disc_ids).k_full

    exterior = extract_surface(mesh, sorted(mesh.part_table))
    pot_mean_z = {pid: mesh.nodes[np.unique(
        mesh.elements[mesh.parts == pid])][:, 2].mean() for pid in pot_ids}
    bottom_pot = min(pot_ids, key=lambda p: pot_mean_z[p])
    top_pot = max(pot_ids, key=lambda p: pot_mean_z[p])
    # complete tet10 faces (corners plus edge midsides): the pot surface
    # must move rigidly, not just its corner lattice
    driven_nodes = face_node_ids(exterior, exterior.tri_parts == top_pot)
    fixed_nodes = face_node_ids(exterior, exterior.tri_parts == bottom_pot)
    if not vert_ids:
        raise MeshError("mesh has no vertebra part")
    observed = _subset_surface(exterior, np.isin(exterior.tri_parts, vert_ids))
    rois = partition_rois(observed, axis=config.roi_axis,
                          fractions=config.roi_fractions)

    if config.markers_path is not None:
        markers = sfio.read_markers(config.markers_path)
        motion, _ = markers.fit()
    else:
        motion = build_flexion_motion(mesh, config.loading)
    bcs = BoundaryConditionSet(fixed=fixed_nodes, driven=driven_nodes, motion=motion)
    return PipelineModel(config=config, mesh=mesh, materials=materials,
                         k_static=k_static, k_disc_unit=k_disc_unit,
                         exterior=exterior, observed=observed, rois=rois,
                         bcs=bcs, driven_nodes=driven_nodes,
                         fixed_nodes=fixed_nodes, motion=motion,
                         disc_part_ids=disc_ids)


def _load_grid(config: PipelineConfig, mesh: Mesh) -> VoxelGrid:
    if config.voxel_grid_path is not None:
        return sfio.read_voxel_grid(config.voxel_grid_path)
    if config.constant_hu is not None:
        lo = mesh.nodes.min(axis=0) - 1.0
        hi = mesh.nodes.max(axis=0) + 1.0
        dims = tuple(int(np.ceil((hi[i] - lo[i]) / 2.0)) + 2 for i in range(3))
        values = np.full(dims[0] * dims[1] * dims[2], config.constant_hu,
                         dtype=np.float32)
        return VoxelGrid(dims=dims, spacing_mm=(2.0, 2.0, 2.0),
                         origin_mm=tuple(lo), values=values)
    raise ConfigError("vertebra mapping needs voxel_grid_path or constant_hu")


@dataclass
class SweepEntry:
    e_disc_mpa: float
    ok: bool
    error: str | None = None
    reaction_n: list[float] | None = None
    reaction_mag_n: float | None = None
    angle_deg: float | None = None
    stats: SolveStats | None = None
    disp: np.ndarray | None = None
    strains: SurfaceStrainField | None = None
    strain_summary: dict | None = None
    report: ComparisonReport | None = None

    def summary_dict(self) -> dict:
        d = {"e_disc_mpa": self.e_disc_mpa, "ok": self.ok, "error": self.error,
             "reaction_n": self.reaction_n, "reaction_mag_n": self.reaction_mag_n,
             "angle_deg": self.angle_deg,
             "strain_summary": self.strain_summary,
             "report": self.report.to_dict() if self.report else None}
        if self.stats is not None:
            # wall time is deliberately left out: serialized results must be
            # reproducible byte for byte across runs and thread counts
            d["solver"] = {"iterations": self.stats.iterations,
                           "residual": self.stats.residual}
        return d


@dataclass
class SweepResult:
    config: PipelineConfig
    model: PipelineModel
    entries: list[SweepEntry]
    measurement_source: str
    cloud: MeasurementCloud

    def entry(self, e_disc_mpa: float) -> SweepEntry:
        for ent in self.entries:
            if ent.e_disc_mpa == e_disc_mpa:
                return ent
        raise KeyError(f"no sweep entry at {e_disc_mpa} MPa")

    def to_dict(self) -> dict:
        return {
            "sweep_e_disc_mpa": [e.e_disc_mpa for e in self.entries],
            "seed": self.config.seed,
            "measurement_source": self.measurement_source,
            "entries": [e.summary_dict() for e in self.entries],
        }


def solve_entry(model: PipelineModel, e_disc_mpa: float,
                compare_cloud: MeasurementCloud | None = None
                ) -> SweepEntry:
    """One full solve at a given disc modulus (plus optional comparison)."""
    cfg = model.config
    entry = SweepEntry(e_disc_mpa=float(e_disc_mpa), ok=False)
    try:
        k_full = model.k_static + float(e_disc_mpa) * model.k_disc_unit
        system = ElasticitySystem(k_full=k_full.tocsr(),
                                  f=np.zeros(3 * model.mesh.n_nodes),
                                  n_nodes=model.mesh.n_nodes)
        system = apply_bcs(system, model.bcs, model.mesh)
        u, stats = solve_pcg(system, tol=cfg.solver.tol, max_iter=cfg.solver.max_iter)
        reaction = reaction_force(system, u, model.driven_nodes)
        strains = surface_strain_field(model.observed, u, model.rois)
        entry.disp = u
        entry.stats = stats
        entry.reaction_n = [float(r) for r in reaction]
        entry.reaction_mag_n = float(np.linalg.norm(reaction))
        entry.angle_deg = rotation_angle(model.motion)
        entry.strains = strains
        entry.strain_summary = roi_average(strains, area_weighted=cfg.comparison.area_weighted)
        if compare_cloud is not None:
            entry.report = compare_fields(
                compare_cloud, model.observed, u, model.rois,
                power=cfg.comparison.idw_power,
                radius_mm=cfg.comparison.idw_radius_mm,
                pct_diff_floor_ue=cfg.comparison.pct_diff_floor_ue,
                area_weighted=cfg.comparison.area_weighted,
                min_points=cfg.comparison.min_points)
        entry.ok = True
    except SpineFEError as exc:
        entry.error = f"{exc.category}: {exc}"
    return entry


def _obtain_cloud(model: PipelineModel) -> tuple[MeasurementCloud, str]:
    cfg = model.config
    if cfg.measurement_path is not None:
        return sfio.read_cloud(cfg.measurement_path), f"file:{cfg.measurement_path}"
    if cfg.synthetic is None:
        raise ConfigError("config needs measurement_path or a synthetic block")
    e_ref = cfg.synthetic.reference_e_disc_mpa
    if e_ref is None:
        e_ref = cfg.sweep_e_disc_mpa[0]
    ref = solve_entry(model, e_ref)
    if not ref.ok:
        raise ConfigError(f"reference solve for synthetic cloud failed: {ref.error}")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    cloud = synth_measurement(model.observed, ref.disp, cfg.synthetic, rng)
    return cloud, f"synthetic:e_disc={e_ref:g}"


def run_sweep(config: PipelineConfig) -> SweepResult:
    """Solve the disc-modulus sweep against one measurement cloud.

    Entries run independently (optionally on a thread pool) and are
    collected in sweep order; a failing entry is recorded and does not
    stop the others.
    """
    model = build_model(config)
    cloud, source = _obtain_cloud(model)

    def job(e: float) -> SweepEntry:
        return solve_entry(model, e, compare_cloud=cloud)

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            entries = list(pool.map(job, config.sweep_e_disc_mpa))
    else:
        entries = [job(e) for e in config.sweep_e_disc_mpa]
    return SweepResult(config=config, model=model, entries=entries,
                       measurement_source=source, cloud=cloud)


def fit_disc_to_force(config: PipelineConfig, target_force_n: float,
                      bracket: tuple[float, float],
                      tol_rel: float = 1e-4, max_solves: int = 30
                      ) -> tuple[float, int]:
    """Disc modulus whose driven-set reaction magnitude hits the target."""
    model = build_model(config)
    calls = [0]

    def force(e: float) -> float:
        calls[0] += 1
        entry = solve_entry(model, e)
        if not entry.ok:
            raise ConfigError(f"solve at {e:g} MPa failed: {entry.error}")
        return entry.reaction_mag_n

    e_star = fit_disc_modulus(force, target_force_n, bracket,
                              tol_rel=tol_rel, max_solves=max_solves)
    return e_star, calls[0]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


_ROI_ORDER = ("left", "central", "right", "total")


def _rows_from_entry(d: dict) -> list[list]:
    rows: list[list] = []
    e = d["e_disc_mpa"]
    if not d["ok"]:
        rows.append(["error", e, "", "", "", "", "", d["error"]])
        return rows
    rows.append(["reaction_mag_n", e, "all", "force", "", "", "", d["reaction_mag_n"]])
    for comp, val in zip(("fx", "fy", "fz"), d["reaction_n"]):
        rows.append([f"reaction_{comp}_n", e, "all", "force", "", "", "", val])
    rows.append(["flexion_angle_deg", e, "all", "motion", "", "", "", d["angle_deg"]])
    rep = d.get("report")
    if rep is None:
        return rows
    for comp in ("ux", "uy", "uz", "pooled"):
        st = rep["displacement"][comp]
        rows.append(["rmse_mm", e, "all", comp, "", "", "", st["rmse"]])
        rows.append(["rmse_pct", e, "all", comp, "", "", "", st["rmse_pct"]])
        for key in ("r2", "slope", "intercept"):
            if key in st:
                rows.append([key, e, "all", comp, "", "", "", st[key]])
    for blk in rep["strain"]:
        part, quantity = blk["part"], blk["quantity"]
        per_roi = blk["per_roi"]
        for stat, key in (("rmse_ue", "rmse"), ("rmse_pct", "rmse_pct"), ("r2", "r2")):
            rows.append([stat, e, part, quantity]
                        + [per_roi[r].get(key) for r in _ROI_ORDER])
        rows.append(["mean_meas_ue", e, part, quantity]
                    + [blk["roi_mean_measured"][r] for r in _ROI_ORDER])
        rows.append(["mean_pred_ue", e, part, quantity]
                    + [blk["roi_mean_predicted"][r] for r in _ROI_ORDER])
        for stat in ("ks_d", "ks_p", "pct_diff_mean_abs", "pct_diff_max_abs"):
            rows.append([stat, e, part, quantity, "", "", "", blk[stat]])
    return rows


def write_tables(entry_dicts: list[dict], outdir) -> list[Path]:
    """summary.csv and curves.csv from per-entry summary dicts."""
    import csv

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    summary = outdir / "summary.csv"
    with summary.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic", "e_disc_mpa", "part", "quantity",
                    "left", "central", "right", "total"])
        for d in entry_dicts:
            for row in _rows_from_entry(d):
                w.writerow([_fmt(v) for v in row])

    curves = outdir / "curves.csv"
    with curves.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["e_disc_mpa"]
        for q in ("eps_max", "eps_min"):
            header += [f"{q}_rmse_pct_{r}" for r in _ROI_ORDER]
        header.append("displacement_rmse_pct")
        w.writerow(header)
        for d in entry_dicts:
            rep = d.get("report")
            if not d["ok"] or rep is None:
                continue
            row = [_fmt(d["e_disc_mpa"])]
            for q in ("eps_max", "eps_min"):
                blk = next(b for b in rep["strain"]
                           if b["part"] == "all" and b["quantity"] == q)
                row += [_fmt(blk["per_roi"][r].get("rmse_pct")) for r in _ROI_ORDER]
            row.append(_fmt(rep["displacement"]["pooled"]["rmse_pct"]))
            w.writerow(row)
    return [summary, curves]


def reemit_tables(sweep_json_path, outdir) -> list[Path]:
    """Rebuild summary.csv/curves.csv from a saved sweep_result.json."""
    try:
        data = json.loads(Path(sweep_json_path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read sweep result: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"sweep result is not valid JSON: {exc}") from None
    if "entries" not in data:
        raise ConfigError("sweep result lacks an 'entries' list")
    return write_tables(data["entries"], outdir)


def emit_reports(result: SweepResult, outdir) -> list[Path]:
    """Write summary.csv, curves.csv, sweep_result.json, and per-entry
    artifacts (displacement/strain CSVs, report JSON, VTK fields)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = write_tables([e.summary_dict() for e in result.entries], outdir)

    sweep_json = outdir / "sweep_result.json"
    sweep_json.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True,
                                     allow_nan=False) + "\n")
    written.append(sweep_json)

    for entry in result.entries:
        if not entry.ok:
            continue
        edir = outdir / f"e_disc_{entry.e_disc_mpa:g}"
        edir.mkdir(exist_ok=True)
        sfio.write_displacements(result.model.mesh, entry.disp, edir / "displacements.csv")
        sfio.write_strains(entry.strains, edir / "strains.csv")
        if entry.report is not None:
            (edir / "report.json").write_text(
                json.dumps(entry.report.to_dict(), indent=2, sort_keys=True,
                           allow_nan=False) + "\n")
        sfio.write_vtk_mesh(result.model.mesh, edir / "solution.vtk",
                            point_vectors={"displacement_mm": entry.disp},
                            cell_scalars={"e_mpa": _entry_moduli(result.model, entry)},
                            title=f"solution at disc modulus {entry.e_disc_mpa:g} MPa")
        sfio.write_vtk_surface(result.model.observed, edir / "surface_strains.vtk",
                               cell_scalars=_strain_cell_data(result.model, entry),
                               title="observed surface principal strains")
        written.extend([edir / "displacements.csv", edir / "strains.csv",
                        edir / "solution.vtk", edir / "surface_strains.vtk"])
    return written


def _entry_moduli(model: PipelineModel, entry: SweepEntry) -> np.ndarray:
    e = model.materials.e_mpa.copy()
    disc_sel = np.isin(model.mesh.parts, model.disc_part_ids)
    e[disc_sel] = entry.e_disc_mpa
    return e


def _strain_cell_data(model: PipelineModel, entry: SweepEntry) -> dict[str, np.ndarray]:
    n = model.observed.n_triangles
    emax = np.zeros(n)
    emin = np.zeros(n)
    emax[entry.strains.tri_ids] = entry.strains.eps_max_ue
    emin[entry.strains.tri_ids] = entry.strains.eps_min_ue
    return {"eps_max_ue": emax, "eps_min_ue": emin,
            "roi": model.rois.labels.astype(np.float64)}
