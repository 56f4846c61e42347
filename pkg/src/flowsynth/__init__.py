"""flowsynth: symbolic flow encoding, from-scratch sequence models, and
statistical fidelity evaluation for synthetic network traffic."""

from .codec import Codebook, SymbolDataset, decode, encode, fit_codebook
from .ingest import FlowTable, clean, load_csv, pca_explained_variance, save_csv
from .models import ModelConfig, count_params, forward, init_params
from .rng import Rng, derive_seed
from .tensor import Tensor, backward
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "Codebook",
    "FlowTable",
    "ModelConfig",
    "Rng",
    "SymbolDataset",
    "Tensor",
    "TrainConfig",
    "backward",
    "clean",
    "count_params",
    "decode",
    "derive_seed",
    "encode",
    "fit_codebook",
    "forward",
    "init_params",
    "load_checkpoint",
    "load_csv",
    "pca_explained_variance",
    "save_checkpoint",
    "save_csv",
    "train",
]
