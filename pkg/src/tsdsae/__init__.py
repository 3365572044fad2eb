"""Disentangled sequential autoencoders with two-stage training, built on a
small numpy autodiff engine, plus a synthetic dataset and evaluation tools."""
from .autodiff import ContractError, DimensionError, DomainError, Tensor
from .distributions import DiagGaussian, kl_diag_gaussians
from .model import ModelConfig, forward, init_params
from .objective import GlobalPriorSpec, LossBreakdown, compute_loss
from .rng import Rng
from .synthdata import Dataset, FactorSpec, generate_dataset, read_dataset, write_dataset
from .training import TrainConfig, TrainState, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
