"""Discriminator-free adversarial domain adaptation for multi-label classification.

A two-component GMM over classifier predictions, estimated in one
differentiable pass, serves as the domain critic.
"""
from .autodiff import Node, backward, finite_difference_check, grl
from .critic import CriticWeights, adversarial_loss, kl_gaussian, w1_gaussian, w2_squared
from .data import MultiLabelDataset, ShiftSpec, generate_pair, load_csv, save_csv
from .deepem import EBlock, deepem_estimate, m_block
from .gmm_em import Gaussian1D, Gmm2, fit_em
from .metrics import MetricReport, average_precision, evaluate
from .trainer import ExperimentConfig, Model, evaluate_model, train

__version__ = "0.1.0"
