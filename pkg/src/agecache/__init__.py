"""agecache: edge-cache simulation driven by a temporal-graph popularity model."""

from .autodiff import Adam, ParameterSet, Tensor, no_grad
from .data import (CsvSchema, GraphState, InteractionEvent, SplitResult, Trace,
                   chronological_split, ingest_csv, sample_negatives)
from .metrics import auc, average_precision
from .model import ModelConfig, PopularityModel
from .synthetic import SyntheticConfig, generate_synthetic_trace
from .training import EvalReport, TrainConfig, TrainResult, evaluate, train

__version__ = "0.1.0"
