"""Training recipe: smoothed targets, masked KL loss, Adam, early stopping.

Captions are taught with teacher forcing: the decoder sees the true
prefix at every position, causally masked, and the loss compares its
distributions to label-smoothed targets while ignoring padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .evaluation import bleu
from .model import (
    END_ID,
    PAD_ID,
    START_ID,
    CaptioningModel,
    ModalityBatch,
    collate,
    greedy_decode,
)
from .tensor import Tape, Tensor, add, log_clamped, mul, scale, sum_tensor
from .transformer import DropoutPolicy


@dataclass
class TrainConfig:
    """Optimization settings; defaults follow the full-scale recipe."""

    batch_size: int = 28
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    gamma: float = 0.7
    max_epochs: int = 200
    patience: int = 50
    seed: int = 0
    val_metric: str = "bleu4"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be positive")
        if not 0 <= self.patience <= self.max_epochs:
            raise ConfigError("patience must lie in [0, max_epochs]")
        if self.val_metric not in ("bleu4", "exact"):
            raise ConfigError(f"unknown val_metric {self.val_metric!r}")


# Single-modality audio runs use a deeper stack and a hotter schedule.
AUDIO_ONLY_PRESET = {"lr": 1e-4, "gamma": 0.2, "n_layers": 2}


def smooth_labels(target_ids: np.ndarray, vocab_size: int, gamma: float) -> np.ndarray:
    """Distribute gamma of the mass evenly over the non-target entries."""
    if vocab_size < 2:
        raise ConfigError(f"smoothing needs vocab_size >= 2, got {vocab_size}")
    if not 0 <= gamma < 1:
        raise ConfigError(f"gamma must lie in [0, 1), got {gamma}")
    ids = np.asarray(target_ids)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise DataError(
            f"target id out of range [0, {vocab_size}): min={ids.min()}, max={ids.max()}"
        )
    out = np.full(ids.shape + (vocab_size,), gamma / (vocab_size - 1))
    np.put_along_axis(out, ids[..., None], 1.0 - gamma, axis=-1)
    return out


def masked_kl_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """KL(target || pred), averaged over unmasked positions.

    target holds full distributions with the same shape as pred; mask
    flags the positions that count with True. Predicted probabilities
    are clamped at 1e-12 inside the log.
    """
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if target.shape != pred.shape:
        raise DataError(f"target shape {target.shape} != pred shape {pred.shape}")
    if mask.shape != pred.shape[:-1]:
        raise DataError(f"mask shape {mask.shape} != position shape {pred.shape[:-1]}")
    n_kept = int(mask.sum())
    if n_kept == 0:
        raise DataError("loss mask excludes every position")
    weighted_target = target * mask[..., None]
    entropy = float(np.sum(np.where(weighted_target > 0.0,
                                    weighted_target * np.log(np.maximum(target, 1e-300)),
                                    0.0)))
    cross = sum_tensor(mul(log_clamped(pred, 1e-12), weighted_target))
    return scale(add(Tensor(entropy), scale(cross, -1.0)), 1.0 / n_kept)


class Adam:
    """Adam with bias correction over a named set of parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.99, eps: float = 1e-8):
        if lr <= 0 or eps <= 0 or not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ConfigError("bad Adam hyperparameters")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def step(self) -> None:
        """Apply one update from the gradients currently held by the leaves.

        All gradients are validated first; a non-finite gradient aborts
        the step before any state changes.
        """
        grads = {}
        for name, tensor in self.params.items():
            if tensor.grad is None:
                continue
            if not np.all(np.isfinite(tensor.grad)):
                raise NumericError(f"non-finite gradient for {name}")
            grads[name] = tensor.grad
        self.step_count += 1
        t = self.step_count
        for name, g in grads.items():
            tensor = self.params[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** t)
            v_hat = self.v[name] / (1 - self.beta2 ** t)
            tensor.data = tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()


@dataclass
class Batch:
    """One padded training batch: modality inputs plus caption tensors."""

    modalities: dict[str, ModalityBatch]
    prefix_ids: np.ndarray    # (B, L) decoder input, starts with the start id
    prefix_pad: np.ndarray    # (B, L) True where the prefix is padding
    target_ids: np.ndarray    # (B, L) next-token targets
    target_mask: np.ndarray   # (B, L) True where the target is real
    lengths: list[int]        # original caption lengths including markers


def pad_batch(samples, config) -> Batch:
    """Pad samples to the longest caption and feature length in the batch."""
    if not samples:
        raise DataError("cannot build an empty batch")
    for s in samples:
        if len(s.caption_ids) < 2:
            raise DataError("caption must hold at least start and end markers")
    lengths = [len(s.caption_ids) for s in samples]
    width = max(lengths) - 1
    n = len(samples)
    prefix = np.full((n, width), PAD_ID, dtype=np.int64)
    target = np.full((n, width), PAD_ID, dtype=np.int64)
    prefix_pad = np.ones((n, width), dtype=bool)
    target_mask = np.zeros((n, width), dtype=bool)
    for i, s in enumerate(samples):
        ids = np.asarray(s.caption_ids, dtype=np.int64)
        k = len(ids) - 1
        prefix[i, :k] = ids[:-1]
        target[i, :k] = ids[1:]
        prefix_pad[i, :k] = False
        target_mask[i, :k] = True
    modalities = collate([s.inputs for s in samples], config)
    return Batch(modalities, prefix, prefix_pad, target, target_mask, lengths)


def batch_loss(model: CaptioningModel, batch: Batch, gamma: float,
               drop: DropoutPolicy) -> Tensor:
    """Forward the batch under teacher forcing and return the mean KL."""
    dist = model.forward(batch.modalities, batch.prefix_ids,
                         prefix_pad=batch.prefix_pad, drop=drop)
    target = smooth_labels(batch.target_ids, model.config.vocab_size, gamma)
    return masked_kl_loss(dist, target, batch.target_mask)


def _strip_markers(ids) -> list[int]:
    out = []
    for i in ids:
        if i == START_ID or i == PAD_ID:
            continue
        if i == END_ID:
            break
        out.append(int(i))
    return out


def decode_corpus(model: CaptioningModel, samples, batch_size: int) -> list[list[int]]:
    """Greedy-decode every sample, batched, returning bare token ids."""
    decoded: list[list[int]] = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        batch = collate([s.inputs for s in chunk], model.config)
        for seq in greedy_decode(model, batch):
            decoded.append(_strip_markers(seq))
    return decoded


def validation_score(model: CaptioningModel, samples, batch_size: int,
                     metric: str) -> float:
    """Corpus metric of greedy decodes against reference captions."""
    candidates = decode_corpus(model, samples, batch_size)
    references = [_strip_markers(s.caption_ids) for s in samples]
    if metric == "exact":
        hits = sum(c == r for c, r in zip(candidates, references))
        return hits / len(samples)
    return bleu(candidates, [[r] for r in references], max_n=4)


@dataclass
class TrainResult:
    best_state: dict
    best_score: float | None
    best_epoch: int | None
    history: list[dict]
    stopped: str  # early | max_epochs | diverged


def train_loop(model: CaptioningModel, train_samples, val_samples,
               cfg: TrainConfig) -> TrainResult:
    """Optimize with per-epoch validation and patience-based stopping.

    After each epoch the model is scored on val_samples; the best-scoring
    weights are kept and restored into the model before returning. With
    no validation samples the loop simply runs max_epochs. A non-finite
    loss or gradient aborts training and restores the last good weights.
    """
    if not train_samples:
        raise DataError("no training samples")
    adam = Adam(model.named_parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    order_rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    best_state = model.state_dict()
    best_score: float | None = None
    best_epoch: int | None = None
    stale = 0
    stopped = "max_epochs"

    for epoch in range(1, cfg.max_epochs + 1):
        order = order_rng.permutation(len(train_samples))
        epoch_losses = []
        diverged = False
        for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
            chosen = [train_samples[i] for i in order[lo:lo + cfg.batch_size]]
            batch = pad_batch(chosen, model.config)
            drop = DropoutPolicy(model.config.dropout,
                                 np.random.default_rng([cfg.seed, epoch, step]))
            try:
                with Tape() as tape:
                    loss = batch_loss(model, batch, cfg.gamma, drop)
                adam.zero_grad()
                tape.backward(loss)
                adam.step()
            except NumericError:
                diverged = True
                break
            epoch_losses.append(loss.item())
        if diverged:
            stopped = "diverged"
            history.append({"epoch": epoch, "train_loss": None, "val_score": None})
            break

        record = {"epoch": epoch,
                  "train_loss": float(np.mean(epoch_losses))}
        if val_samples:
            score = validation_score(model, val_samples, cfg.batch_size,
                                     cfg.val_metric)
            record["val_score"] = score
            if best_score is None or score > best_score:
                best_score = score
                best_epoch = epoch
                best_state = model.state_dict()
                stale = 0
            else:
                stale += 1
            history.append(record)
            if stale >= cfg.patience:
                stopped = "early"
                break
        else:
            record["val_score"] = None
            best_state = model.state_dict()
            best_epoch = epoch
            history.append(record)

    model.load_state_dict(best_state)
    return TrainResult(best_state, best_score, best_epoch, history, stopped)
