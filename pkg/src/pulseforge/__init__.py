"""Learned control pulses for single-qubit Rx(theta) gates on a simulated transmon."""

__version__ = "0.1.0"

from .arb import ArbConfig, ArbResult, arb_estimate, confidence_interval, fit_decay
from .datasetpipe import AngleDataset, ReductionMap, average_over_seeds, reduce_coefficients, smooth, split
from .gatenet import FixedPointFormat, MlpModel, init_model, quantize_model, train_infidelity, train_mse
from .pulseoptim import OptimJob, generate_raw_dataset, optimize_pulse
from .qusim import TransmonConfig, evolve, measure_survival, trace_fidelity, unitarize
from .spsatune import FinetuneJob, SpsaParams, finetune, spsa_gradient
from .splinepulse import PulseCoefficients, SplineBasis, build_basis, envelope

__all__ = [
    "AngleDataset", "ArbConfig", "ArbResult", "FinetuneJob", "FixedPointFormat", "MlpModel", "OptimJob",
    "PulseCoefficients", "ReductionMap", "SpsaParams", "SplineBasis", "TransmonConfig",
    "arb_estimate", "average_over_seeds", "build_basis", "confidence_interval", "envelope", "evolve",
    "finetune", "fit_decay", "generate_raw_dataset", "init_model", "measure_survival", "optimize_pulse",
    "quantize_model", "reduce_coefficients", "smooth", "spsa_gradient", "split", "trace_fidelity",
    "train_infidelity", "train_mse", "unitarize",
]
