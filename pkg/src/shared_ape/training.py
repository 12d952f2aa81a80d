"""Mini-batch SGD with validation-driven learning-rate decay and best-checkpoint selection."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import epoch_order
from .model import ModelConfig, length_mask, pad_batch, param_nodes, teacher_forcing_batch
from .numerics import Graph, backward, save_checkpoint, sgd_step
from .subword import EOS_ID

log = logging.getLogger(__name__)

IdTriplet = Tuple[Sequence[int], Sequence[int], Sequence[int]]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1.0
    lr_decay: float = 0.5
    batch_size: int = 32
    clip_norm: Optional[float] = 5.0
    seed: int = 0
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_ppl: float
    lr: float  # rate used during this epoch
    improved: bool


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 1.0
    best_ppl: float = math.inf
    best_epoch: int = 0
    history: List[EpochStats] = field(default_factory=list)

    def record(self, stats: EpochStats, decay: float) -> None:
        """Append one epoch's result and apply the plateau rule to the next epoch's rate."""
        self.history.append(stats)
        self.epoch = stats.epoch
        if stats.val_ppl < self.best_ppl:
            self.best_ppl = stats.val_ppl
            self.best_epoch = stats.epoch
        else:
            self.lr *= decay


@dataclass
class Batch:
    src: List[Sequence[int]]
    mt: List[Sequence[int]]
    pe: List[Sequence[int]]

    def __len__(self) -> int:
        return len(self.pe)

    def padded(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return pad_batch(self.src), pad_batch(self.mt), pad_batch(self.pe)


def make_batches(corpus_ids: Sequence[IdTriplet], batch_size: int, order: Sequence[int]) -> List[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    batches = []
    for start in range(0, len(order), batch_size):
        items = [corpus_ids[i] for i in order[start:start + batch_size]]
        batches.append(Batch([t[0] for t in items], [t[1] for t in items], [t[2] for t in items]))
    return batches


def batch_loss(params: Dict[str, np.ndarray], config: ModelConfig, batch: Batch, training: bool = False,
               rng: Optional[np.random.Generator] = None, with_grad: bool = False):
    """Summed token cross-entropy of a batch, its token count, and gradients when asked."""
    g = Graph(grad=with_grad)
    P = param_nodes(g, params)
    res = teacher_forcing_batch(g, P, config, batch.src, batch.mt, batch.pe, training, rng)
    total = float(res.loss.value)
    if not with_grad:
        return total, res.n_tokens, None
    # gradient of the mean token loss
    scaled = g.scale(res.loss, 1.0 / res.n_tokens)
    table = backward(g, scaled)
    grads = {name: table[node.id] for name, node in P.items() if node.id in table}
    return total, res.n_tokens, grads


def token_accuracy(params: Dict[str, np.ndarray], config: ModelConfig, corpus_ids: Sequence[IdTriplet],
                   batch_size: int = 64) -> float:
    """Fraction of ``pe + </s>`` positions whose argmax prediction under teacher forcing is correct."""
    correct = total = 0
    order = np.arange(len(corpus_ids))
    for batch in make_batches(corpus_ids, batch_size, order):
        g = Graph(grad=False)
        P = param_nodes(g, params)
        res = teacher_forcing_batch(g, P, config, batch.src, batch.mt, batch.pe)
        targets = pad_batch([list(p) + [EOS_ID] for p in batch.pe])
        target_mask = length_mask([len(p) + 1 for p in batch.pe], targets.shape[1])
        for t, logits in enumerate(res.logits):
            mask = target_mask[:, t]
            pred = logits.value.argmax(axis=-1)
            correct += int(((pred == targets[:, t]) & mask).sum())
            total += int(mask.sum())
    return correct / total


def validate(params: Dict[str, np.ndarray], config: ModelConfig, val_ids: Sequence[IdTriplet],
             batch_size: int = 64) -> float:
    """exp(total cross-entropy / number of predicted tokens), dropout off."""
    if len(val_ids) == 0:
        raise ValueError("empty validation corpus")
    total = 0.0
    count = 0
    for batch in make_batches(val_ids, batch_size, np.arange(len(val_ids))):
        loss, n, _ = batch_loss(params, config, batch)
        total += loss
        count += n
    return math.exp(total / count)


def train(params: Dict[str, np.ndarray], config: ModelConfig, train_ids: Sequence[IdTriplet],
          val_ids: Sequence[IdTriplet], tc: TrainConfig,
          on_epoch: Optional[Callable[[EpochStats, Dict[str, np.ndarray]], None]] = None,
          ) -> Tuple[Dict[str, np.ndarray], TrainState]:
    """Train in place; return (a copy of the best-validation parameters, the training state)."""
    if len(train_ids) == 0:
        raise ValueError("empty training corpus")
    state = TrainState(lr=tc.lr)
    rng = np.random.default_rng(tc.seed)
    best = copy.deepcopy(params)
    ckpt_dir = Path(tc.checkpoint_dir) if tc.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (ckpt_dir / "train.log").write_text("", encoding="utf-8")

    for epoch in range(1, tc.epochs + 1):
        order = epoch_order(train_ids, tc.seed + epoch)
        loss_sum = 0.0
        tokens = 0
        for b, batch in enumerate(make_batches(train_ids, tc.batch_size, order)):
            loss, n, grads = batch_loss(params, config, batch, training=True, rng=rng, with_grad=True)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss in epoch {epoch}, batch {b}")
            sgd_step(params, grads, state.lr, tc.clip_norm)
            loss_sum += loss
            tokens += n
        val_ppl = validate(params, config, val_ids)
        stats = EpochStats(epoch, loss_sum / tokens, val_ppl, state.lr, val_ppl < state.best_ppl)
        state.record(stats, tc.lr_decay)
        if stats.improved:
            best = copy.deepcopy(params)
        log.info("epoch %d\ttrain_loss %.4f\tval_ppl %.4f\tlr %g", epoch, stats.train_loss, val_ppl, stats.lr)
        if ckpt_dir:
            save_checkpoint(ckpt_dir / f"epoch{epoch:03d}.ckpt", params)
            if stats.improved:
                save_checkpoint(ckpt_dir / "best.ckpt", params)
            with open(ckpt_dir / "train.log", "a", encoding="utf-8") as fh:
                fh.write(format_epoch_line(stats) + "\n")
        if on_epoch:
            on_epoch(stats, params)
    return best, state


def format_epoch_line(stats: EpochStats) -> str:
    return f"{stats.epoch}\t{stats.train_loss:.6f}\t{stats.val_ppl:.6f}\t{stats.lr:g}"


def read_config_file(path) -> Dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def write_config_file(path, values: Dict[str, object]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(values):
            fh.write(f"{key}={values[key]}\n")
