"""Lipschitz-constrained variational autoencoders with certified robustness margins."""

from .attack import AttackConfig, estimate_margin, estimate_margins, latent_space_attack, max_damage_attack
from .certify import CertInput, CertReport, global_margin, margin_bound
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load_mnist_idx, synthetic_blobs
from .lipnet import LipschitzMLP, OrthoConfig, bjorck_orthonormalize, group_sort
from .trainer import TrainConfig, Trainer, train
from .vae import VaeModel, elbo, elbo_and_grad

__version__ = "0.1.0"
