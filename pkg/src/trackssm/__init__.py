"""TrackSSM: a state-space motion model for multi-object tracking, with a ByteTrack-style harness."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data_io import Records, SyntheticScene, build_segments, gen_scene, parse_mot, segment_arrays, write_mot
from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    IncompatibleCheckpoint,
    InputError,
    ParseError,
    TrackSSMError,
    TrainingError,
)
from .metrics import EvalReport, evaluate, idf1, mean_prediction_iou, mota_lite
from .model import BBox, ModelConfig, TrackSSM, TrajectoryHistory, predict_next
from .tracker import AssociationConfig, ByteTracker, KalmanPredictor, SSMPredictor, track_sequence
from .training import TrainConfig, train

__version__ = "0.1.0"
