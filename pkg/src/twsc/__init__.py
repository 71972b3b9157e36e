"""Two-way semantic image transmission over learned channel surrogates.

Two nodes exchange images through a noisy reciprocal channel. Receivers
and a conditional-GAN channel surrogate train on real channel output;
transmitters then train locally through the frozen surrogate, so no
gradient or feedback ever crosses the link. One-way end-to-end training
(``jscc``) and a pilot-blind surrogate (``gansc``) are the built-in
baselines.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config, parse_config
from .data import Dataset, batch_schedule, ingest_mnist, write_synthetic_corpus
from .errors import (CheckpointError, ConfigParseError, ContractError,
                     DegenerateInputError, IngestError, LinkFeedbackError,
                     NumericFaultError, TrainingDivergedError, TwscError,
                     ValidationError)
from .metrics import MetricRow, MetricTable, evaluate_sweep, psnr, ssim
from .training import TrainRun, train_system, weight_reciprocity_report
from .transceiver import NetArch, Node, SymbolBlock

__all__ = [
    "CheckpointError", "ConfigParseError", "ContractError", "Dataset",
    "DegenerateInputError", "ExperimentConfig", "IngestError",
    "LinkFeedbackError", "MetricRow", "MetricTable", "NetArch", "Node",
    "NumericFaultError", "SymbolBlock", "TrainRun", "TrainingDivergedError",
    "TwscError", "ValidationError", "batch_schedule", "evaluate_sweep",
    "ingest_mnist", "load_config", "parse_config", "psnr", "ssim",
    "train_system", "weight_reciprocity_report", "write_synthetic_corpus",
]
