from ohformer.training.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ohformer.training.data import ReidDataset, holdout_split, load_dataset
from ohformer.training.losses import batch_hard_triplet, cross_entropy, total_loss
from ohformer.training.optim import SGD, cosine_lr
from ohformer.training.sampler import PKSampler, pk_sample
from ohformer.training.trainer import Trainer, restore_model, spec_from_config

__all__ = [
    "Checkpoint",
    "PKSampler",
    "ReidDataset",
    "SGD",
    "Trainer",
    "batch_hard_triplet",
    "cosine_lr",
    "cross_entropy",
    "holdout_split",
    "load_checkpoint",
    "load_dataset",
    "pk_sample",
    "restore_model",
    "save_checkpoint",
    "spec_from_config",
    "total_loss",
]
