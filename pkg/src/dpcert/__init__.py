"""Risk certificates for stochastic classifiers whose PAC-Bayes prior is trained with DP-SGD.

The prior's data dependence is paid for with a max-information bound
computed from the DP-SGD hyperparameters alone.
"""

__version__ = "0.1.0"

from .bounds import (DomainError, MaxInfoBound, TrainingRecipe, maxinfo_dpsgd_explicit,
                     maxinfo_dpsgd_optimized, maxinfo_gaussian_mechanism, maxinfo_pure_dp,
                     noise_ratio, ratio_R, tau_closed_form, tau_tight)
from .dpsgd import UpdateRule, clip, create_batches, dpsgd_batch, dpsgd_stream, train
from .models import BoundedLoss, DatasetHandle, ModelSpec, load_csv, synth_dataset
from .pac_bayes import (ConfidenceSplit, RiskCertificate, StochasticModel, binary_kl, gaussian_kl,
                        kl_inverse, pinsker_gap, union_bound_certificate)

__all__ = [
    "BoundedLoss", "ConfidenceSplit", "DatasetHandle", "DomainError", "MaxInfoBound", "ModelSpec",
    "RiskCertificate", "StochasticModel", "TrainingRecipe", "UpdateRule", "binary_kl", "clip",
    "create_batches", "dpsgd_batch", "dpsgd_stream", "gaussian_kl", "kl_inverse", "load_csv",
    "maxinfo_dpsgd_explicit", "maxinfo_dpsgd_optimized", "maxinfo_gaussian_mechanism",
    "maxinfo_pure_dp", "noise_ratio", "pinsker_gap", "ratio_R", "synth_dataset", "tau_closed_form",
    "tau_tight", "train", "union_bound_certificate",
]
