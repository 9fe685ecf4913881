"""Coding-theory toolkit for multiplexed FISH barcodes.

Pipeline stages: constant-weight codebook generation, a per-round Gaussian
intensity model with EM calibration, quantization to binary asymmetric
channels, exact MAP/MLE/reject decoding via posterior Voronoi tables with
exact TPR/FDR analysis, and evolutionary optimization of the code-to-molecule
assignment.
"""

__version__ = "0.1.0"

from .assignopt import EvoConfig, EvoHistory, evolve, fitness, mutate, order_parameter, spearman
from .channel import (
    BacParams,
    GaussianChannelParams,
    IntensityTable,
    LikelihoodTable,
    bac_from_gaussian,
    gaussian_params_for_rates,
    likelihood_table,
    log_likelihood,
    quantization_thresholds,
    quantize,
    round_mixture_weights,
    simulate,
)
from .codebook import (
    AssignmentMap,
    Codebook,
    PriorDist,
    ValidationReport,
    estimate_dirichlet_alpha,
    generate_mhd4,
    hamming_distance,
    random_assignment,
    sample_dirichlet_prior,
    validate,
)
from .decoder import (
    REJECT,
    ConfusionResult,
    DecoderSpec,
    Metrics,
    SweepRecord,
    SweepReport,
    VoronoiTable,
    build_voronoi,
    confusion,
    decode_soft,
    decode_table,
    dirichlet_sweep,
    metrics,
    posterior,
)
from .errors import DegenerateRoundError, InputError, MfishError, NumericalError
from .gmmfit import ColumnFit, EmConfig, FitAllResult, fit_all, fit_em, qq_data

__all__ = [name for name in dir() if not name.startswith("_")]
