"""Robust data-driven predictive control for a CAV in mixed traffic.

The package is organized bottom-up: ``data_engine`` turns recorded
trajectories into Hankel partitions, ``predictor`` builds the behavioral
predictor and the nominal program, ``uncertainty`` estimates polytopic
disturbance sets, ``reformulation`` produces the tractable min-max
programs, ``conic`` solves them, ``traffic`` simulates the platoon, and
``harness`` closes the receding-horizon loop and runs the experiments.
"""

from .conic import ConicProgram, Solution, available_solvers, solve
from .data_engine import (CollectionDiverged, Dims, HankelBlocks,
                          OfflineDataset, build_hankel, collect_offline_data,
                          is_persistently_exciting, load_dataset_csv,
                          partition)
from .harness import (ControllerConfig, RunResult, SafetyReport, SCENARIOS,
                      classify_safety, control_step, estimate_equilibrium,
                      experiment_a, experiment_b, run_receding_horizon)
from .predictor import (ControlBounds, CostWeights, InitialWindow,
                        PredictorCore, assemble_baseline, assemble_core,
                        predict)
from .reformulation import (InfeasibleSpacingBand, Reducer, ReducedProblem,
                            box_support, complexity, dual_program,
                            extract_inputs, vertex_program)
from .traffic import (OvmParams, SimConfig, TrafficSim, equilibrium_spacing,
                      fuel_rate, ovm_desired_velocity)
from .uncertainty import (DisturbancePolytope, apply_downsampling,
                          downsample_map, enumerate_vertices,
                          estimate_constant_bounds,
                          estimate_timevarying_bounds)

__version__ = "0.1.0"

__all__ = [
    "ConicProgram", "Solution", "available_solvers", "solve",
    "CollectionDiverged", "Dims", "HankelBlocks", "OfflineDataset",
    "build_hankel", "collect_offline_data", "is_persistently_exciting",
    "load_dataset_csv", "partition",
    "ControllerConfig", "RunResult", "SafetyReport", "SCENARIOS",
    "classify_safety", "control_step", "estimate_equilibrium",
    "experiment_a", "experiment_b", "run_receding_horizon",
    "ControlBounds", "CostWeights", "InitialWindow", "PredictorCore",
    "assemble_baseline", "assemble_core", "predict",
    "InfeasibleSpacingBand", "Reducer", "ReducedProblem", "box_support",
    "complexity", "dual_program", "extract_inputs", "vertex_program",
    "OvmParams", "SimConfig", "TrafficSim", "equilibrium_spacing",
    "fuel_rate", "ovm_desired_velocity",
    "DisturbancePolytope", "apply_downsampling", "downsample_map",
    "enumerate_vertices", "estimate_constant_bounds",
    "estimate_timevarying_bounds",
    "__version__",
]
