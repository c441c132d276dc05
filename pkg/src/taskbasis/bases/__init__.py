from .achievability import Certificate, achievability_certificate
from .autoencoder import (
    AeConfig,
    AeFit,
    DivergenceError,
    NumericalError,
    ae_gradients,
    ae_loss_gram,
    finite_difference_check,
    fit_ae,
    fit_ae_gram,
    ols_decoder,
    parse_anneal,
    softmax_columns,
    softmax_logits_for,
)
from .baselines import fit_pca, fit_rand_proj, fit_rand_select, pca_positive_softmax_weights
from .model import BasisModel, Method, UnsupportedOperation, load_model, save_model

__all__ = [
    "AeConfig",
    "AeFit",
    "BasisModel",
    "Certificate",
    "DivergenceError",
    "Method",
    "NumericalError",
    "UnsupportedOperation",
    "achievability_certificate",
    "ae_gradients",
    "ae_loss_gram",
    "finite_difference_check",
    "fit_ae",
    "fit_ae_gram",
    "fit_pca",
    "fit_rand_proj",
    "fit_rand_select",
    "load_model",
    "ols_decoder",
    "parse_anneal",
    "pca_positive_softmax_weights",
    "save_model",
    "softmax_columns",
    "softmax_logits_for",
]
