"""Trigeminal transformer for video descriptors, on a small numpy autodiff core."""

from .data import FormatError, SynthSpec, Tracklet, read_cube, rrs_sample, synth_generate, write_cube
from .evalkit import RankingReport, cmc_curve, evaluate, mean_ap
from .model import ModelConfig, TmtModel, TrainConfig, load_checkpoint, save_checkpoint, trigeminal_forward
from .numerics import ConfigError, ContractError, DimensionError, NumericError, Tensor
from .pipeline import RunConfig, benchmark_config, fit

__version__ = "0.1.0"
