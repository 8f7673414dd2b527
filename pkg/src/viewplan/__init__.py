"""Active camera-view selection for Gaussian-splat initialization."""

from .errors import (ConfigInvalid, DimensionMismatch, EmptyCandidates, EmptyCloud, IoFailure,
                     OracleFailure, ParseError, SchemaError, SingularKernel, ViewplanError)
from .geometry import CameraIntrinsics, CameraPose, PointCloud, VoxelGrid
from .experiment import ExperimentConfig, RunReport, load_config, load_preset, run_experiment
from .gp import GpSurrogate, KernelBounds, KernelConfig
from .objective import ObjectiveValue, evaluate_rq
from .scene import ReconstructionOracle, SceneSpec, generate_scene
from .selector import ActiveSettings, CandidateSet, acquire_next, run_active
from .splats import Gaussian3D, SplatModel, init_from_cloud

__version__ = "0.1.0"
