"""Knowledge-point measurement for distilled versus from-scratch classifiers."""
from .errors import (ConfigError, DegenerateFeatureError, DimensionError, KPLabError, NonFiniteError,
                     StageError, UndefinedMetricError)
from .data import LabeledDataset, gen_dataset
from .nn import ModelSpec, Network, TrainConfig, default_spec, init_params, rescale_layers, train
from .distill import DistillConfig, distill_phase1, head_finetune
from .quantify import EntropyMap, QuantifierConfig, SigmaField, entropy_map, optimize_sigma, optimize_sigma_batch
from .metrics import build_report, count_knowledge_points, lambda_ratio, stability_rho
from .lab import ExperimentConfig, run_experiment, smoke_config

__version__ = "0.1.0"
