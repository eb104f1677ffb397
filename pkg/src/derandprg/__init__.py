"""Pseudorandom generators for tail bounds and signed majorities, plus exact and sampled checkers."""
__version__ = "0.1.0"

from .analysis import (DistributionTable, WeightVector, cosine_product_approx, exact_sum_distribution,
                       fourier_coeff, fourier_to_tv_bound, hv_statistic, moment_probe, norm_trajectory,
                       tail_probability, tv_distance)
from .chernoff import ChernoffConfig, chernoff_params, final_prg, inner_prg, one_step, project, recursive_prg
from .core import (ConstantGenerator, Generator, Seed, SignVector, TableGenerator, bias_wrap, symmetrize,
                   xor_combine)
from .errors import CalibrationError, CapacityError, ConfigurationError
from .hashing import (combined_family, delta_biased_family, eps_biased_bits, kwise_family, spreading_family,
                      verify_spreading)
from .inw import ROBP, halfspace_robp, inw_prg, robp_eval
from .majority import base_generator, large_alpha_prg, signed_majority_prg, small_alpha_prg

__all__ = [
    "DistributionTable", "WeightVector", "cosine_product_approx", "exact_sum_distribution", "fourier_coeff",
    "fourier_to_tv_bound", "hv_statistic", "moment_probe", "norm_trajectory", "tail_probability", "tv_distance",
    "ChernoffConfig", "chernoff_params", "final_prg", "inner_prg", "one_step", "project", "recursive_prg",
    "ConstantGenerator", "Generator", "Seed", "SignVector", "TableGenerator", "bias_wrap", "symmetrize",
    "xor_combine", "CalibrationError", "CapacityError", "ConfigurationError", "combined_family",
    "delta_biased_family", "eps_biased_bits", "kwise_family", "spreading_family", "verify_spreading", "ROBP",
    "halfspace_robp", "inw_prg", "robp_eval", "base_generator", "large_alpha_prg", "signed_majority_prg",
    "small_alpha_prg",
]
