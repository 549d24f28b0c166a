"""
Training loop.

The loop is the only writer of model state. Per step the main thread draws
the PK batch and one seed per image from the run generator, so the batch
sequence depends only on the seed; image augmentation then runs on the
worker pool with per-image generators.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from tqdm import tqdm

from ohformer.config import RunConfig, write_resolved
from ohformer.errors import ConfigurationError, NumericError, OutputError
from ohformer.nn.model import OHFormer
from ohformer.nn.stack import StackSpec, format_stack, parse_stack
from ohformer.tensor import Rng, Tensor, backward
from ohformer.training.augment import AugmentConfig, augment_batch
from ohformer.training.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ohformer.training.data import ReidDataset, label_map
from ohformer.training.losses import total_loss
from ohformer.training.optim import SGD, cosine_lr
from ohformer.training.sampler import PKSampler

logger = logging.getLogger(__name__)

LOG_NAME = "log.tsv"
LOG_COLUMNS = ("step", "lr", "loss_total", "loss_ce_cls", "loss_tri_cls", "loss_parts")

PathLike = Union[str, Path]


def spec_from_config(config: RunConfig, classes: int) -> StackSpec:
    """Stack spec from the config's geometry keys; tokens inside ``config.stack`` take precedence."""
    return parse_stack(
        config.stack,
        layers=config.layers,
        width=config.width,
        heads=config.heads,
        parts=config.parts,
        classes=classes,
        mode=config.mode,
        lrp=config.lrp,
        prior_mixing=config.prior_mixing,
        prior_axis=config.prior_axis,
        tie_vk=config.tie_vk,
        deform_depthwise=config.deform_depthwise,
        mlp_ratio=config.mlp_ratio,
        input_size=config.input_size,
    )


def checkpoint_name(step: int) -> str:
    return f"ckpt-{step}.ohf"


def restore_model(ckpt: Checkpoint, bn_momentum: float = 0.1) -> OHFormer:
    """
    Rebuild the model a checkpoint describes and load its tensors.

    Raises:
        ConfigurationError / ParseError: the stored stack text is invalid
        ContractError / DimensionError: tensors do not match the stack
    """
    spec = parse_stack(ckpt.spec)
    model = OHFormer(spec, Rng(0), bn_momentum)
    model.load_state_dict(ckpt.params)
    return model


@dataclass
class StepLog:
    step: int
    lr: float
    loss_total: float
    loss_ce_cls: float
    loss_tri_cls: float
    loss_parts: float

    def row(self):
        return (self.step, f"{self.lr:.8g}", f"{self.loss_total:.6f}", f"{self.loss_ce_cls:.6f}",
                f"{self.loss_tri_cls:.6f}", f"{self.loss_parts:.6f}")


@dataclass
class TrainResult:
    checkpoint: Optional[Path]
    logs: List[StepLog] = field(default_factory=list)


class Trainer:
    """
    Args:
        config: Resolved run configuration
        dataset: Training split
        out_dir: Run directory for config.resolved, log.tsv and checkpoints
        progress: Show a progress bar
    """

    def __init__(self, config: RunConfig, dataset: ReidDataset, out_dir: PathLike, progress: bool = True):
        self.config = config
        self.dataset = dataset
        self.out_dir = Path(out_dir)
        self.progress = progress
        classes = label_map(dataset.pids)
        self.classes = classes
        self.targets = np.array([classes[int(p)] for p in dataset.pids], dtype=np.int64)
        self.spec = spec_from_config(config, len(classes))
        if self.spec.input_size != tuple(dataset.images.shape[2:]):
            raise ConfigurationError(f"images are {dataset.images.shape[2:]}, model expects {self.spec.input_size}")
        self.rng = Rng(config.seed)
        self.model = OHFormer(self.spec, self.rng, config.bn_momentum)
        self.optimizer = SGD(self.model.named_parameters(), config.momentum, config.weight_decay)
        self.sampler = PKSampler(self.targets, config.p_ids, config.k_per_id, self.rng)
        self.augment = AugmentConfig(flip=config.flip, erase=config.erase)
        self.fill = dataset.channel_mean()
        self.step = 0

    @property
    def spec_text(self) -> str:
        return format_stack(self.spec)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.spec_text, self.model.state_dict(), self.optimizer.state_dict(),
                          self.step, self.rng.get_state())

    def resume(self, path: PathLike) -> None:
        """
        Continue from a checkpoint written by a run with the same configuration.

        Raises:
            ConfigurationError: the checkpoint was written for a different stack
        """
        ckpt = load_checkpoint(path)
        if ckpt.spec != self.spec_text:
            raise ConfigurationError(f"checkpoint stack {ckpt.spec!r} differs from configured {self.spec_text!r}")
        self.model.load_state_dict(ckpt.params)
        self.optimizer.load_state_dict(ckpt.optimizer)
        self.step = ckpt.step
        self.rng.set_state(ckpt.rng_state)
        logger.info("resumed from %s at step %d", path, self.step)

    def train_step(self) -> StepLog:
        """
        One SGD step.

        Raises:
            NumericError: the loss is not finite
        """
        cfg = self.config
        lr = cosine_lr(self.step, cfg.steps, cfg.lr)
        batch = self.sampler.sample()
        seeds = [self.rng.seed() for _ in range(len(batch.indices))]
        images = augment_batch(self.dataset.images[batch.indices], seeds, self.augment, self.fill)

        self.model.train()
        out = self.model(Tensor(images))
        losses = total_loss(self.model.head_outputs(out), batch.labels, cfg.margin)
        value = losses.total.item()
        if not np.isfinite(value):
            raise NumericError("non-finite training loss", self.step)
        self.optimizer.zero_grad()
        backward(losses.total)
        self.optimizer.step(lr)
        log = StepLog(self.step, lr, value, losses.ce_cls, losses.tri_cls, losses.parts)
        self.step += 1
        return log

    def save(self) -> Path:
        return save_checkpoint(self.out_dir / checkpoint_name(self.step), self.checkpoint())

    def _open_log(self):
        path = self.out_dir / LOG_NAME
        fresh = self.step == 0 or not path.exists()
        try:
            fh = open(path, "w" if fresh else "a", newline="", encoding="utf-8")
        except OSError as e:
            raise OutputError(f"cannot write {path}: {e}") from e
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        if fresh:
            writer.writerow(LOG_COLUMNS)
        return fh, writer

    def run(self) -> TrainResult:
        """Train until ``config.steps``; checkpoints every ``save_every`` steps and at the end."""
        cfg = self.config
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OutputError(f"cannot create run directory {self.out_dir}: {e}") from e
        write_resolved(cfg, self.out_dir)
        result = TrainResult(None)
        logger.info("training %s for %d steps (from step %d)", self.spec_text, cfg.steps, self.step)
        fh, writer = self._open_log()
        try:
            bar = tqdm(total=cfg.steps, initial=self.step, disable=not self.progress, desc="train", unit="step")
            while self.step < cfg.steps:
                log = self.train_step()
                result.logs.append(log)
                writer.writerow(log.row())
                bar.update(1)
                bar.set_postfix(loss=f"{log.loss_total:.4f}")
                if self.step % cfg.log_every == 0:
                    logger.info("step %d lr %.6f loss %.4f (ce %.4f tri %.4f parts %.4f)", self.step, log.lr,
                                log.loss_total, log.loss_ce_cls, log.loss_tri_cls, log.loss_parts)
                if cfg.save_every and self.step % cfg.save_every == 0 and self.step < cfg.steps:
                    self.save()
            bar.close()
        finally:
            fh.close()
        result.checkpoint = self.save()
        logger.info("finished at step %d, checkpoint %s", self.step, result.checkpoint)
        return result
