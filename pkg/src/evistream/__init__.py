"""Evidence-accumulating slice-stream classifier with a windowed-attention encoder."""

from .accumulator import (AccumulatorConfig, EvidenceModel, EvidenceState, accumulate_step,
                          project_evidence, run_stream)
from .config import ExperimentConfig
from .data import SyntheticSpec, VolumeSample, generate_synthetic, load_dataset, order_slices
from .encoder import EncoderConfig, encode_slice, encode_slices
from .harness import SweepGrid, TrainConfig, evaluate_metrics, nested_cv, roc_auc, threshold_sweep, train
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
