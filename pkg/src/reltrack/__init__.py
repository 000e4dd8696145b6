"""reltrack: anchor-free relative position tracking for moving node cohorts.

Fuses pairwise UWB two-way ranging with per-node inertial dead reckoning
through one extended Kalman filter per node pair, and keeps the whole
constellation spatially consistent by re-embedding the pairwise distance
matrix with classical multidimensional scaling after every ranging round.
Includes a deterministic protocol/world simulator and a CLI.
"""

from .calibration import (
    CalibrationError,
    ImuBias,
    UwbCalibration,
    estimate_imu_bias,
    ransac_affine_fit,
)
from .geometry import (
    quat_compose,
    quat_from_axis_angle,
    quat_from_rotvec,
    quat_identity,
    quat_inverse,
    quat_rotate,
    symmetric_eigendecomposition,
)
from .mds import (
    AlignmentTransform,
    MdsSolution,
    align_to_reference,
    classical_mds,
    double_center_kernel,
)
from .orientation import (
    GravityModel,
    ImuSample,
    LocalEstimate,
    OrientationFilter,
    gravity_compensate,
    simulate_local_estimate,
)
from .pair_filter import (
    ControlInput,
    OutlierGate,
    PairFilter,
    PairState,
    RangeObservation,
)
from .pipeline import (
    ConstellationPipeline,
    LayoutSnapshot,
    PipelineParams,
    TimelineBuffer,
    compute_metrics,
)
from .ranging import (
    SPEED_OF_LIGHT,
    NodeProtocol,
    ProtocolConfig,
    RangeEstimate,
    RangingMessage,
    ideal_frequency,
    resolve_tof,
)
from .simulator import (
    ScenarioConfig,
    load_scenario,
    run_scenario,
    simulate_range,
)

__version__ = "0.1.0"
