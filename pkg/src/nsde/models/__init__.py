"""Classical and neural SDE models, Black-Scholes closed forms and Dupire utilities."""

from .closed_form import bs_delta, bs_implied_vol, bs_price, price_bounds
from .dupire import (
    CONVEXITY_EPS, SIGMA2_MAX, SIGMA2_MIN, DupireResult, FunctionSurface, LocalVolTable, NetworkSurface, NnlvConfig,
    NnlvFit, VolSurface, dupire_local_vol, dupire_variance, nnlv_fit,
)
from .sde import (
    NNLV, SDENN, BlackScholes, Coeffs, CustomSde, DupireLV, Heston, NeuralLocalVol, SDENNDrift, SdeModel, TwoDNN,
    TwoDNNHeston, load_model, model_from_json, model_kinds, model_to_json, save_model,
)

__all__ = [
    "bs_delta", "bs_implied_vol", "bs_price", "price_bounds",
    "CONVEXITY_EPS", "SIGMA2_MAX", "SIGMA2_MIN", "DupireResult", "FunctionSurface", "LocalVolTable",
    "NetworkSurface", "NnlvConfig", "NnlvFit", "VolSurface", "dupire_local_vol", "dupire_variance", "nnlv_fit",
    "NNLV", "SDENN", "BlackScholes", "Coeffs", "CustomSde", "DupireLV", "Heston", "NeuralLocalVol", "SDENNDrift",
    "SdeModel", "TwoDNN", "TwoDNNHeston", "load_model", "model_from_json", "model_kinds", "model_to_json",
    "save_model",
]
