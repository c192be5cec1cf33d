"""geoext: verification and simulation of (projective) geodesic extensions
for purely kinetic nonholonomic mechanical systems."""

from .chaplygin import (ChaplyginStructure, ClassificationReport, GyroData,
                        build_structure, candidate_from_first_integral,
                        classify, conditionAG_residual, dbeta_residual,
                        first_integral_residual, gyro_data, gyroscopic_alpha,
                        hamiltonization_residual, invariant_measure_residual,
                        orthogonal_candidate, phi_infeasibility,
                        phi_simplicity_residual, psi_relatedness_residual,
                        recover_f, reduced_field, useful_identity_defect)
from .dynamics import (IntegrateOptions, State, Trajectory,
                       compare_as_point_sets, geodesic_field, integrate,
                       integrate_geodesic, integrate_nonholonomic,
                       kinetic_energy, lagrange_multipliers,
                       nonholonomic_field, projective_field, trajectory_csv)
from .extensions import (Candidate, ResidualReport, ScanResult,
                         carriage_scan_ansatz, chaplygin_B_residual,
                         complete_metric, condition_A_residual,
                         condition_B_residual, grid_residual_report,
                         pregeodesic_residual, scan_preserving_extension)
from .geometry import (Box, ConfigSpace, Frame, FramedMetric, FramedSystem,
                       Metric, ScalarField, VectorField,
                       bracket_coefficients, christoffel_contraction,
                       frame_decompose, lie_bracket, metric_in_frame)
from .systems import (GroupAction, builtin, carriage_ell1, load_system,
                      parse_config)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
