"""CT-based multi-segment spine finite elements with measurement validation.

Submodules: mesh (tet10 phantoms and surfaces), materials (HU -> modulus),
solver (assembly, constraints, PCG, reactions), registration (rigid fits,
ICP), strain (surface principal strains), metrics (IDW, regression, KS,
comparison reports), io (file formats), pipeline (config-driven sweeps),
cli (command line).
"""

from .errors import (BracketError, CompareError, ConfigError, ConvergenceError,
                     FormatError, MaterialError, MeshError, RegistrationError,
                     SolverError, SpineFEError)
from .materials import (CalibrationLaw, DensityElasticityLaw, MaterialField,
                        Provenance, VoxelGrid, assign_uniform, calibrate_density,
                        density_to_modulus, map_materials, trilinear_sample)
from .mesh import (Mesh, Part, PartRole, PhantomSpec, Region, RoIPartition,
                   SurfaceMesh, build_phantom, check_edge_lengths,
                   extract_surface, face_node_ids, partition_rois)
from .metrics import (ComparisonReport, FieldStats, MeasurementCloud,
                      RegressionStats, StrainComparison, compare_fields,
                      idw_interpolate, ks_two_sample, linear_regression,
                      percent_difference, rmse, rmse_pct, roi_average)
from .pipeline import (LoadCase, PipelineConfig, SweepEntry, SweepResult,
                       SyntheticSpec, build_flexion_motion, build_model,
                       emit_reports, fit_disc_to_force, load_config, run_sweep,
                       solve_entry, synth_measurement)
from .registration import (MarkerSet, RigidMotion, TriangleLocator, align_frames,
                           fit_rigid_motion, rotation_angle)
from .solver import (BoundaryConditionSet, ElasticitySystem, SolveStats,
                     apply_bcs, assemble, fit_disc_modulus, reaction_force,
                     solve_pcg, tet10_stiffness)
from .strain import (SurfaceStrainField, principal_strains, surface_strain_field,
                     triangle_strain)

__version__ = "0.1.0"
