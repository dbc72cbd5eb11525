"""trackseek: multi-object tracking with a learned tracklet scorer.

The pieces, bottom up: :mod:`trackseek.core` (boxes, detections, tracklets),
:mod:`trackseek.encoder` (LSTM / attention scorers with hand-derived
gradients), :mod:`trackseek.losses` (margin / rank / cross-entropy),
:mod:`trackseek.training` (search-based training loop and Adam),
:mod:`trackseek.association` (Hungarian online tracker and MHT),
:mod:`trackseek.metrics` (CLEAR and identity metrics), :mod:`trackseek.data`
(MOT-format and binary embedding I/O plus synthetic scenario generation),
and :mod:`trackseek.cli`.
"""

from .core import (
    BBox,
    Detection,
    FrameOrderError,
    HypothesisSet,
    Tracklet,
    Trajectory,
    count_ids,
    extend,
    iou,
    make_tracklet,
)
from .encoder import (
    GradientSet,
    ModelParams,
    attend,
    backward,
    embed,
    grad_check,
    init_params,
    load_checkpoint,
    save_checkpoint,
    score,
    step,
)
from .losses import (
    LossOutput,
    ScoredBranch,
    cross_entropy_baseline,
    margin_loss,
    rank_loss,
    step_loss,
)
from .data import (
    DataError,
    Scenario,
    SynthConfig,
    TrainingClip,
    load_scenario,
    parse_mot,
    records_to_trajectories,
    sample_clips,
    save_scenario,
    synth_generate,
    write_mot,
)
from .training import (
    TrainConfig,
    TrainResult,
    search_separation_rate,
    separation_rate,
    train,
)
from .association import (
    AssocConfig,
    build_conflict_graph,
    hungarian,
    mwis,
    track_mht,
    track_online,
)
from .metrics import (
    EvalReport,
    MetricsError,
    clear_mot,
    evaluate,
    format_report,
    id_metrics,
)

__version__ = "0.1.0"

__all__ = [
    "BBox", "Detection", "FrameOrderError", "HypothesisSet", "Tracklet",
    "Trajectory", "count_ids", "extend", "iou", "make_tracklet",
    "GradientSet", "ModelParams", "attend", "backward", "embed",
    "grad_check", "init_params", "load_checkpoint", "save_checkpoint",
    "score", "step",
    "LossOutput", "ScoredBranch", "cross_entropy_baseline", "margin_loss",
    "rank_loss", "step_loss",
    "DataError", "Scenario", "SynthConfig", "TrainingClip", "load_scenario",
    "parse_mot", "records_to_trajectories", "sample_clips", "save_scenario",
    "synth_generate", "write_mot",
    "TrainConfig", "TrainResult", "search_separation_rate",
    "separation_rate", "train",
    "AssocConfig", "build_conflict_graph", "hungarian", "mwis", "track_mht",
    "track_online",
    "EvalReport", "MetricsError", "clear_mot", "evaluate", "format_report",
    "id_metrics",
    "__version__",
]
