"""Robust AUC fairness under noisy protected-group labels.

Pairwise AUC training with per-group-pair AUC gap constraints that are
enforced for the worst pair distribution inside a total-variation ball
around the observed one, solved by projected stochastic gradient
descent-ascent with a sharpness-aware step.
"""

from .aucfair import GroupAucReport, exact_auc, fairness_violation, group_auc_report, minmax_ratio
from .dataset import Batch, Dataset, Schema, inject_group_noise, load_tabular, make_synthetic, split, stratified_sample
from .dro import GammaMatrix, PairDistribution, estimate_gamma, greedy_tv_max, project_tv_ball, tv_distance
from .scorer import MlpParams, forward, init_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "Batch", "Dataset", "GammaMatrix", "GroupAucReport", "MlpParams", "PairDistribution", "Schema",
    "TrainConfig", "TrainResult", "estimate_gamma", "exact_auc", "fairness_violation", "forward",
    "greedy_tv_max", "group_auc_report", "init_params", "inject_group_noise", "load_checkpoint",
    "load_tabular", "make_synthetic", "minmax_ratio", "project_tv_ball", "save_checkpoint", "split",
    "stratified_sample", "train", "tv_distance",
]
