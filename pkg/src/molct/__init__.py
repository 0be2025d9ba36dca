"""Relation-aware attention potentials for molecules, with adaptive per-atom depth."""

from .autodiff import Tensor, grad
from .config import RunConfig, load_config
from .datasets import LabeledSample, parse_extxyz, write_extxyz
from .featurize import FeaturizerConfig, MolecularGraph
from .niu import ModelConfig, MolCtModel, molct_forward
from .readout import loss, predict_energy_forces

__all__ = [
    "Tensor", "grad", "RunConfig", "load_config", "LabeledSample", "parse_extxyz", "write_extxyz",
    "FeaturizerConfig", "MolecularGraph", "ModelConfig", "MolCtModel", "molct_forward", "loss",
    "predict_energy_forces",
]
