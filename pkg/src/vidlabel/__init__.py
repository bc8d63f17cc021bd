"""vidlabel: temporally coherent video pseudo-labels from noisy per-frame
instance masks and point trajectories, plus the training kernels to densify
them by student-teacher distillation."""

from .clustering import NOISE, dbscan, hamming_distance
from .discovery import (
    DiscoveryConfig,
    KeymaskDiscovery,
    MatchingMatrix,
    VisibilityGroup,
    assemble_keymasks,
    build_matching_matrix,
    discover,
    discover_video,
    group_by_visibility,
    matching_tracks,
    point_mask_jaccard,
    subgroup_by_matching,
)
from .distill import (
    Snippet,
    SparseToDenseDistiller,
    TrainConfig,
    densify,
    sample_pseudo_dense_snippet,
    teacher_pseudo_labels,
    train_stage1,
    train_stage2,
)
from .labelset import (
    InstanceLabels,
    Labelset,
    VideoLabels,
    is_dense,
    load_labelset,
    save_labelset,
)
from .losses import (
    LossWeights,
    bce_loss,
    dice_loss,
    distill_loss,
    ema_update,
    full_loss,
    grad_check,
    hungarian_match,
    mask_loss,
    match_predictions,
    temporal_droploss,
)
from .masks import Point2, RleMask, contains_point, contains_points, mask_iou, rle_decode, rle_encode
from .metrics import VideoPrediction, evaluate_labelsets, j_and_f, st_iou, video_ap
from .propagator import (
    PropagatorSpec,
    ToyPropagator,
    VideoClip,
    backprop_params,
    load_model,
    save_model,
    toy_forward,
)
from .synthetic import ShapeSpec, SynthConfig, SyntheticVideo, synth_generate
from .tracks import (
    InstanceTrack,
    TrackSet,
    Trajectory,
    init_point_grid,
    load_trackset,
    save_trackset,
    visibility_ratio,
    visibility_vector,
)
from .validation import DivergenceError, InputError, SchemaError

__version__ = "0.1.0"
