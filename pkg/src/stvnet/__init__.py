"""Spatiotemporal V-Net segmentation and right-ventricular quantification
for gated cardiac volumes, on a pure-numpy autodiff engine."""

__version__ = "0.1.0"

from .convlstm import ConvLSTMCell, ConvLSTMState, cell_step, sequence_forward
from .errors import (
    DimensionMismatchError,
    FormatError,
    GateCountMismatchError,
    MalformedHeaderError,
    NoCavityError,
    SpecError,
    SurfaceDistanceError,
    TrainingDivergedError,
    TruncatedDataError,
    UndefinedMetricError,
)
from .harness import FoldPlan, SequenceSample, kfold_split, run_cv, sequence_window, sweep_gates
from .metrics import agreement, asd, dsc, hausdorff, sn_sp
from .networks import Network, NetworkSpec, build, forward_segment, load_checkpoint, save_checkpoint
from .phantom import GatedStudy, PhantomConfig, generate_dataset, read_dataset, write_dataset
from .quantification import QuantResult, quantify_masks, rvef
from .training import TrainConfig, adam_step, augment, dice_loss, l1_penalty, train

__all__ = [
    "ConvLSTMCell", "ConvLSTMState", "DimensionMismatchError", "FoldPlan", "FormatError",
    "GateCountMismatchError", "GatedStudy", "MalformedHeaderError", "Network", "NetworkSpec",
    "NoCavityError", "PhantomConfig", "QuantResult", "SequenceSample", "SpecError",
    "SurfaceDistanceError", "TrainConfig", "TrainingDivergedError", "TruncatedDataError",
    "UndefinedMetricError", "adam_step", "agreement", "asd", "augment", "build", "cell_step",
    "dice_loss", "dsc", "forward_segment", "generate_dataset", "hausdorff", "kfold_split",
    "l1_penalty", "load_checkpoint", "quantify_masks", "read_dataset", "run_cv", "rvef",
    "save_checkpoint", "sequence_forward", "sequence_window", "sn_sp", "sweep_gates", "train",
    "write_dataset",
]
