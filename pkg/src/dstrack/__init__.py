"""Dense spatio-temporal position encoding and track association toolkit."""

from .autodiff import (
    NonFiniteError,
    Parameter,
    Tensor,
    finite_diff_gradient,
    grouped_softmax,
    linear,
)
from .optim import OptimizerConfig, adam_step
from .encoding import (
    AlphaPolicy,
    BBox,
    ImageGeometry,
    RoISpec,
    TrajectoryEncoding,
    accumulate_trajectory,
    classic_encoding,
    encode_image,
    encode_roi,
    extend_trajectory,
)
from .association import (
    AssociationMatrix,
    AttentionMask,
    EmbeddingStack,
    apply_mask,
    det_traj_attention,
    detection_attention,
    embed_detection,
    embed_trajectory,
)
from .training import (
    ClipSample,
    Detection,
    TrainConfig,
    build_gt_clip_matrix,
    loss_clip,
    loss_det_traj,
    train,
    truncate_trajectories,
)
from .tracker import Tracker, TrackerConfig, TrackOutput, hungarian
from .simulator import ScenarioConfig, elliptical_mask, generate, sample_clips
from .metrics import EvalReport, association_accuracy, evaluate, id_switches, idf1

__version__ = "0.1.0"
