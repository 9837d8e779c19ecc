"""Angle-estimation bounds and position optimization for planar movable-antenna arrays."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    DegenerateGeometryError, GradientEvaluationError, InvalidInputError, MasenseError, SingularFimError,
)
from .model import (  # noqa: E402
    ArrayGeometry, ScenarioConfig, SnapshotBundle, SpatialAngle, TargetSet, sample_covariance,
    steering_derivatives, steering_vector, synthesize_snapshots, validate_geometry,
)
from .crb import (  # noqa: E402
    CrbResult, check_bound_conditions, crb_matrix, fim_blocks, lower_bound, sensitivity_diagnostics,
)
from .music import estimate_aoas, evaluate_mse, music_spectrum  # noqa: E402
from .swarm import (  # noqa: E402
    MonteCarloSampleSet, SwarmParams, draw_sample_set, expected_crb_trace, optimize_positions,
)
from .kernels import BACKEND as KERNEL_BACKEND  # noqa: E402
