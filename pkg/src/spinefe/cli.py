"""Command line interface.

    spinefe --config cfg.json [--seed N] [--out DIR] [--threads N] [-v] COMMAND

Commands: phantom, map, solve, sweep, fit-disc, synth-dic, compare, report.
Usage errors exit with status 2 (argparse); domain failures print one line
``error:<category>: message`` and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as sfio
from . import pipeline
from .errors import ConfigError, SpineFEError
from .materials import Provenance
from .mesh import check_edge_lengths
from .pipeline import SyntheticSpec, load_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spinefe",
        description="CT-based multi-segment spine FE pipeline with "
                    "measurement-cloud validation")
    parser.add_argument("--config", help="pipeline config JSON")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the config output directory")
    parser.add_argument("--threads", type=int, help="override sweep parallelism")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("phantom", help="build the stack phantom mesh and write it")
    sub.add_parser("map", help="map CT materials and write the element table")

    p = sub.add_parser("solve", help="single solve at one disc modulus")
    p.add_argument("--e-disc", type=float, metavar="MPA",
                   help="disc modulus (default: first sweep value)")

    sub.add_parser("sweep", help="disc-modulus sweep with full reports")

    p = sub.add_parser("fit-disc", help="fit the disc modulus to a target force")
    p.add_argument("--target-force", type=float, required=True, metavar="N")
    p.add_argument("--bracket", type=float, nargs=2, required=True,
                   metavar=("LO_MPA", "HI_MPA"))
    p.add_argument("--tol-rel", type=float, default=1e-4)
    p.add_argument("--max-solves", type=int, default=30)

    p = sub.add_parser("synth-dic", help="synthesize a measured displacement cloud")
    p.add_argument("--e-disc", type=float, metavar="MPA")
    p.add_argument("--spacing", type=float, metavar="MM",
                   help="target sample spacing in mm")
    p.add_argument("--rand-um", type=float, help="random error std in um")
    p.add_argument("--sys-um", type=float, help="systematic error magnitude in um")

    p = sub.add_parser("compare", help="solve and compare against a measured cloud")
    p.add_argument("--cloud", help="cloud CSV (default: config measurement_path)")
    p.add_argument("--e-disc", type=float, metavar="MPA")

    p = sub.add_parser("report", help="rebuild summary tables from a sweep result")
    p.add_argument("--result", help="sweep_result.json (default: <out>/sweep_result.json)")
    return parser


def _config_from_args(args) -> pipeline.PipelineConfig:
    if not args.config:
        raise ConfigError(f"command {args.command!r} needs --config")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("threads must be >= 1")
        cfg.threads = args.threads
    return cfg


def _outdir(cfg) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _default_e_disc(cfg, flag: float | None) -> float:
    return float(flag) if flag is not None else float(cfg.sweep_e_disc_mpa[0])


def _say(args, msg: str) -> None:
    if args.verbose:
        print(msg)


def _cmd_phantom(args) -> int:
    cfg = _config_from_args(args)
    if cfg.phantom is None:
        raise ConfigError("phantom command needs a phantom block in the config")
    mesh = pipeline.mesh_from_config(cfg)
    out = _outdir(cfg)
    path = out / "mesh.txt"
    sfio.write_mesh(mesh, path)
    print(f"wrote {path} ({mesh.n_nodes} nodes, {mesh.n_elements} elements, "
          f"{len(mesh.part_table)} parts)")
    return 0


def _cmd_map(args) -> int:
    cfg = _config_from_args(args)
    mesh = pipeline.mesh_from_config(cfg)
    materials = pipeline.build_materials(cfg, mesh)
    out = _outdir(cfg)
    path = out / "materials.csv"
    lines = ["element_id,part,role,e_mpa,nu,provenance"]
    for i in range(mesh.n_elements):
        part = mesh.part_table[int(materials.parts[i])]
        prov = Provenance(int(materials.provenance[i])).name
        e = materials.e_mpa[i]
        nu = materials.nu[i]
        lines.append(f"{i},{part.name},{part.role.value},"
                     f"{'' if np.isnan(e) else format(e, '.10g')},"
                     f"{'' if np.isnan(nu) else format(nu, '.10g')},{prov}")
    path.write_text("\n".join(lines) + "\n")
    mapped = int((materials.provenance == Provenance.MAPPED).sum())
    print(f"wrote {path} ({mapped} mapped elements, "
          f"{len(materials.coverage_gaps())} unset)")
    return 0


def _write_entry_artifacts(model, entry, out: Path) -> None:
    sfio.write_displacements(model.mesh, entry.disp, out / "displacements.csv")
    sfio.write_strains(entry.strains, out / "strains.csv")
    sfio.write_vtk_mesh(model.mesh, out / "solution.vtk",
                        point_vectors={"displacement_mm": entry.disp})
    (out / "entry.json").write_text(
        json.dumps(entry.summary_dict(), indent=2, sort_keys=True,
                   allow_nan=False) + "\n")


def _cmd_solve(args) -> int:
    cfg = _config_from_args(args)
    e_disc = _default_e_disc(cfg, args.e_disc)
    _say(args, f"building model for disc modulus {e_disc:g} MPa")
    model = pipeline.build_model(cfg)
    entry = pipeline.solve_entry(model, e_disc)
    if not entry.ok:
        print(f"error:{entry.error}", file=sys.stderr)
        return 1
    out = _outdir(cfg)
    _write_entry_artifacts(model, entry, out)
    print(f"solved {model.mesh.n_nodes * 3} DOFs in {entry.stats.iterations} "
          f"iterations ({entry.stats.wall_time_s:.2f} s)")
    print(f"reaction on driven pot: {entry.reaction_mag_n:.6g} N")
    print(f"artifacts in {out}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    _say(args, f"sweeping disc moduli {cfg.sweep_e_disc_mpa} MPa "
               f"on {cfg.threads} thread(s)")
    result = pipeline.run_sweep(cfg)
    out = _outdir(cfg)
    pipeline.emit_reports(result, out)
    failures = 0
    for entry in result.entries:
        if entry.ok:
            pooled = (entry.report.displacement["pooled"].rmse_pct
                      if entry.report else None)
            pooled_txt = f"{pooled:.3g}%" if pooled is not None else "n/a"
            print(f"e_disc {entry.e_disc_mpa:g} MPa: reaction "
                  f"{entry.reaction_mag_n:.6g} N, displacement rmse {pooled_txt}")
        else:
            failures += 1
            print(f"e_disc {entry.e_disc_mpa:g} MPa: FAILED ({entry.error})")
    print(f"reports in {out}")
    if failures:
        print(f"error:sweep: {failures} of {len(result.entries)} entries failed",
              file=sys.stderr)
        return 1
    return 0


def _cmd_fit_disc(args) -> int:
    cfg = _config_from_args(args)
    e_star, solves = pipeline.fit_disc_to_force(
        cfg, args.target_force, tuple(args.bracket),
        tol_rel=args.tol_rel, max_solves=args.max_solves)
    out = _outdir(cfg)
    payload = {"e_disc_mpa": e_star, "target_force_n": args.target_force,
               "bracket_mpa": list(args.bracket), "tol_rel": args.tol_rel,
               "solves": solves}
    (out / "fit_disc.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"fitted disc modulus: {e_star:.6g} MPa ({solves} solves)")
    return 0


def _cmd_synth_dic(args) -> int:
    cfg = _config_from_args(args)
    spec = cfg.synthetic if cfg.synthetic is not None else SyntheticSpec()
    if args.spacing is not None:
        spec.spacing_mm = args.spacing
    if args.rand_um is not None:
        spec.random_um = args.rand_um
    if args.sys_um is not None:
        spec.systematic_um = args.sys_um
    e_disc = args.e_disc if args.e_disc is not None else spec.reference_e_disc_mpa
    e_disc = _default_e_disc(cfg, e_disc)

    model = pipeline.build_model(cfg)
    entry = pipeline.solve_entry(model, e_disc)
    if not entry.ok:
        print(f"error:{entry.error}", file=sys.stderr)
        return 1
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    cloud = pipeline.synth_measurement(model.observed, entry.disp, spec, rng)
    out = _outdir(cfg)
    path = out / "cloud.csv"
    sfio.write_cloud(cloud, path)
    print(f"wrote {path} ({cloud.n_points} points, spacing {spec.spacing_mm:g} mm, "
          f"noise {spec.random_um:g} um random / {spec.systematic_um:g} um systematic)")
    return 0


def _cmd_compare(args) -> int:
    cfg = _config_from_args(args)
    if args.cloud is not None:
        cfg.measurement_path = args.cloud
    if cfg.measurement_path is None:
        raise ConfigError("compare needs --cloud or measurement_path in the config")
    cloud = sfio.read_cloud(cfg.measurement_path)
    e_disc = _default_e_disc(cfg, args.e_disc)
    model = pipeline.build_model(cfg)
    entry = pipeline.solve_entry(model, e_disc, compare_cloud=cloud)
    if not entry.ok:
        print(f"error:{entry.error}", file=sys.stderr)
        return 1
    out = _outdir(cfg)
    (out / "report.json").write_text(
        json.dumps(entry.report.to_dict(), indent=2, sort_keys=True,
                   allow_nan=False) + "\n")
    disp = entry.report.displacement["pooled"]
    print(f"displacement: rmse {disp.rmse:.6g} mm"
          + (f" ({disp.rmse_pct:.3g}%)" if disp.rmse_pct is not None else ""))
    for q in ("eps_max", "eps_min"):
        blk = entry.report.strain_block("all", q)
        tot = blk.per_roi["total"]
        r2 = tot.regression.r2 if tot.regression else float("nan")
        print(f"{q}: rmse {tot.rmse:.6g} ue, r2 {r2:.4f}, ks_d {blk.ks_d:.4f}")
    print(f"report in {out / 'report.json'}")
    return 0


def _cmd_report(args) -> int:
    cfg = _config_from_args(args)
    out = _outdir(cfg)
    result_path = Path(args.result) if args.result else out / "sweep_result.json"
    paths = pipeline.reemit_tables(result_path, out)
    for p in paths:
        print(f"wrote {p}")
    return 0


_COMMANDS = {
    "phantom": _cmd_phantom,
    "map": _cmd_map,
    "solve": _cmd_solve,
    "sweep": _cmd_sweep,
    "fit-disc": _cmd_fit_disc,
    "synth-dic": _cmd_synth_dic,
    "compare": _cmd_compare,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except SpineFEError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
