"""Continuous-state neural hidden Markov models trained by particle EM."""

from .data import Dataset, SyntheticConfig, Trajectory, generate_synthetic, load_csv, save_csv, standardize, train_test_split
from .dist import DiagGaussian, gauss_logpdf, gauss_logpdf_grad, gauss_sample
from .model import NeuralHmm, emission_dist, make_model, make_vanilla, simulate, transition_dist
from .nncore import Mlp, OptimizerState, ParamGrad, mlp_backward, mlp_forward, mlp_init, optimizer_step
from .oracle import LinearGaussianModel, from_vanilla, kalman_loglik, to_vanilla
from .smc import SmcResult, bootstrap_filter, estimate_loglik, q_hat, resample_multinomial
from .train import TrainConfig, TrainHistory, closed_form_m_step, em_sgd_iteration, sample_loss_grad, train

__all__ = [
    "Dataset",
    "SyntheticConfig",
    "Trajectory",
    "generate_synthetic",
    "load_csv",
    "save_csv",
    "standardize",
    "train_test_split",
    "DiagGaussian",
    "gauss_logpdf",
    "gauss_logpdf_grad",
    "gauss_sample",
    "NeuralHmm",
    "emission_dist",
    "make_model",
    "make_vanilla",
    "simulate",
    "transition_dist",
    "Mlp",
    "OptimizerState",
    "ParamGrad",
    "mlp_backward",
    "mlp_forward",
    "mlp_init",
    "optimizer_step",
    "LinearGaussianModel",
    "from_vanilla",
    "kalman_loglik",
    "to_vanilla",
    "SmcResult",
    "bootstrap_filter",
    "estimate_loglik",
    "q_hat",
    "resample_multinomial",
    "TrainConfig",
    "TrainHistory",
    "closed_form_m_step",
    "em_sgd_iteration",
    "sample_loss_grad",
    "train",
]

__version__ = "0.1.0"
