"""Numerical certification of Anosov families on flat tori.

A family is a two-sided sequence of torus diffeomorphisms ``f_i``. The
package estimates its stable/unstable splitting, fits hyperbolicity
constants, builds invariant cone fields and C1 radii, and certifies
random perturbations inside those radii.
"""
__version__ = "0.1.0"

from .adapted_metric import AdaptedMetric, adapted_norm, build_adapted_metric, verify_strict
from .certify import (
    Certificate,
    PerturbationModel,
    Resolutions,
    build_bundle,
    certify_family,
    certify_perturbed,
    convert_constants,
    generate_perturbation,
    openness_experiment,
)
from .cones import ConeSpec, eta_bound, lambda_prime, sigma_bound
from .errors import AnosovError, ConfigError
from .family import (
    AffineToral,
    Composite,
    FamilySpec,
    PerturbedCat,
    TrigPerturbed,
    alternating_family,
    c1_distance,
    cat_family,
    constant_family,
    identity_family,
    random_perturbed_cat_family,
)
from .geometry import MetricSpec, TangentVector, TorusPoint
from .splitting import estimate_splitting, fit_constants

__all__ = [
    "AdaptedMetric", "AffineToral", "AnosovError", "Certificate", "Composite", "ConeSpec",
    "ConfigError", "FamilySpec", "MetricSpec", "PerturbationModel", "PerturbedCat",
    "Resolutions", "TangentVector", "TorusPoint", "TrigPerturbed", "adapted_norm",
    "alternating_family", "build_adapted_metric", "build_bundle", "c1_distance", "cat_family",
    "certify_family", "certify_perturbed", "constant_family", "convert_constants",
    "estimate_splitting", "eta_bound", "fit_constants", "generate_perturbation",
    "identity_family", "lambda_prime", "openness_experiment", "random_perturbed_cat_family",
    "sigma_bound", "verify_strict",
]
