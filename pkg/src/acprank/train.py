"""Training: sequence sampling, focal loss, Adam with warm-up, train loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import EmbeddingSet
from .errors import ConfigError, TrainingDivergedError
from .model import ACPModel
from .ranking import pairwise_distance, topk_neighbors

_log = logging.getLogger(__name__)

_CLAMP = 1e-7


@dataclass
class TrainConfig:
    K: int = 1000
    l1: int = 64
    l2: int = 6
    gamma: float = 1.0
    lr: float = 2e-4
    weight_decay: float = 5e-4
    warmup_epochs: int = 10
    warmup_factor: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if not self.l2 <= self.l1 <= self.K:
            raise ConfigError(f"need l2 <= l1 <= K, got l2={self.l2}, "
                              f"l1={self.l1}, K={self.K}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.warmup_epochs < 0 or not 0 < self.warmup_factor <= 1:
            raise ConfigError("bad warmup settings")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("bad epochs/batch_size")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must be in [0, 1)")


@dataclass
class SequenceSample:
    probe_item: int
    indices: np.ndarray  # positions into the training set, probe first
    labels: np.ndarray  # 1 where the element shares the probe identity


def build_training_sequences(train_set: EmbeddingSet, K: int, l1: int, seed: int):
    """One sequence per usable probe: the probe plus l1 elements sampled
    uniformly from its correct matches united with its l1 nearest false
    matches (the hardest negatives), re-sorted by original distance.

    Sampling is a pure function of (seed, probe item_id). Probes whose
    neighborhood offers no correct match or too small a pool are skipped.
    Returns (samples, skipped_count).
    """
    n = len(train_set)
    if K > n:
        raise ConfigError(f"K={K} exceeds the training set size {n}")
    if l1 > K:
        raise ConfigError(f"l1={l1} exceeds K={K}")
    emb = train_set.concat_normalized()
    ids = train_set.identities()
    items = train_set.item_ids()
    dist = pairwise_distance(emb, emb, "cosine")
    rank, _ = topk_neighbors(dist, K)

    samples = []
    skipped = 0
    for probe in range(n):
        neighbors = rank[probe]
        neighbors = neighbors[neighbors != probe]  # probe is prepended later
        correct = neighbors[ids[neighbors] == ids[probe]]
        wrong = neighbors[ids[neighbors] != ids[probe]][:l1]
        pool = np.concatenate([correct, wrong])
        if correct.size == 0 or pool.size < l1:
            skipped += 1
            continue
        rng = np.random.default_rng([seed, int(items[probe])])
        pick = rng.choice(pool, size=l1, replace=False)
        order = {int(j): r for r, j in enumerate(neighbors)}
        pick = np.array(sorted(pick.tolist(), key=order.__getitem__), dtype=np.int64)
        indices = np.concatenate([[probe], pick])
        labels = (ids[indices] == ids[probe]).astype(np.float64)
        samples.append(SequenceSample(int(items[probe]), indices, labels))
    if skipped:
        _log.warning("sequence sampler skipped %d of %d probes", skipped, n)
    return samples, skipped


def gather_blocks(train_set: EmbeddingSet, batch, dtype=np.float32):
    """Stack the block features for a batch of samples into per-block
    (batch, k1, dim_b) arrays plus the (batch, k1) label matrix."""
    mats = [train_set.block_matrix(b) for b in range(len(train_set.block_dims))]
    idx = np.stack([s.indices for s in batch])
    blocks = [m[idx].astype(dtype) for m in mats]
    labels = np.stack([s.labels for s in batch])
    return blocks, labels


def focal_loss(scores: T.Tensor, labels: np.ndarray, gamma: float) -> T.Tensor:
    """Mean of -(1 - p_t)**gamma * log(p_t), p_t being the probability
    assigned to the true class; scores are clamped away from {0, 1}."""
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    y = np.asarray(labels, dtype=scores.dtype)
    s = T.clamp(scores, _CLAMP, 1.0 - _CLAMP)
    p_t = T.add(T.mul(s, y), T.mul(T.add(T.neg(s), 1.0), 1.0 - y))
    weight = T.pow_const(T.add(T.neg(p_t), 1.0), gamma)
    return T.mean_all(T.neg(T.mul(weight, T.log(p_t))))


class Adam:
    """Adam with decoupled weight decay on decay-flagged parameters."""

    def __init__(self, params: dict, weight_decay=0.0,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self, lr_t: float):
        self.t += 1
        bias1 = 1.0 - self.b1 ** self.t
        bias2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            if not p.trainable:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"non-finite gradient in parameter {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if p.decay and self.weight_decay:
                p.value -= lr_t * self.weight_decay * p.value
            p.value -= lr_t * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up from warmup_factor * lr to lr, then constant."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    if cfg.warmup_epochs == 0 or epoch >= cfg.warmup_epochs:
        return cfg.lr
    frac = epoch / cfg.warmup_epochs
    return cfg.lr * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * frac)


@dataclass
class TrainResult:
    curve: list = field(default_factory=list)  # (epoch, train_loss, holdout_loss)
    best_epoch: int = -1
    best_holdout: float = float("inf")
    skipped_probes: int = 0

    def curve_csv(self) -> str:
        lines = ["epoch,mean_loss,holdout_loss"]
        lines += [f"{e},{tr:.8f},{ho:.8f}" for e, tr, ho in self.curve]
        return "\n".join(lines) + "\n"


def train(model: ACPModel, train_set: EmbeddingSet, cfg: TrainConfig,
          log_fn=None) -> TrainResult:
    """Optimize the model in place; keeps the parameters of the epoch with
    the best held-out loss. Bit-reproducible for a fixed seed."""
    samples, skipped = build_training_sequences(train_set, cfg.K, cfg.l1, cfg.seed)
    if not samples:
        raise ConfigError("no usable training sequences")
    result = TrainResult(skipped_probes=skipped)
    if cfg.epochs == 0:
        return result

    split_rng = np.random.default_rng([cfg.seed, 1])
    order = split_rng.permutation(len(samples))
    n_hold = int(round(cfg.holdout_fraction * len(samples)))
    hold = [samples[i] for i in order[:n_hold]]
    fit = [samples[i] for i in order[n_hold:]]
    if not fit:
        raise ConfigError("holdout fraction leaves no training sequences")

    opt = Adam(model.parameters(), weight_decay=cfg.weight_decay)
    best_state = None

    for epoch in range(cfg.epochs):
        lr_t = lr_at(epoch, cfg)
        epoch_rng = np.random.default_rng([cfg.seed, 2, epoch])
        perm = epoch_rng.permutation(len(fit))
        losses = []
        for bi in range(0, len(fit), cfg.batch_size):
            batch = [fit[i] for i in perm[bi:bi + cfg.batch_size]]
            blocks, labels = gather_blocks(train_set, batch, model.dtype)
            drop_rng = np.random.default_rng([cfg.seed, 3, epoch, bi])
            model.zero_grad()
            with T.Tape() as tape:
                scores = model.predict_correlations(blocks, cfg.l2, mode="train",
                                                    rng=drop_rng)
                loss = focal_loss(scores, labels, cfg.gamma)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {bi // cfg.batch_size}")
            tape.backward(loss)
            opt.step(lr_t)
            losses.append(value)

        train_loss = float(np.mean(losses))
        holdout_loss = _holdout_loss(model, train_set, hold, cfg) if hold else train_loss
        result.curve.append((epoch, train_loss, holdout_loss))
        if holdout_loss < result.best_holdout:
            result.best_holdout = holdout_loss
            result.best_epoch = epoch
            best_state = _snapshot(model)
        if log_fn:
            log_fn(f"epoch {epoch}: loss {train_loss:.5f} holdout {holdout_loss:.5f} "
                   f"lr {lr_t:.2e}")

    if best_state is not None:
        _restore(model, best_state)
    model.trained = True
    return result


def _holdout_loss(model, train_set, hold, cfg) -> float:
    total, count = 0.0, 0
    for bi in range(0, len(hold), cfg.batch_size):
        batch = hold[bi:bi + cfg.batch_size]
        blocks, labels = gather_blocks(train_set, batch, model.dtype)
        scores = model.predict_correlations(blocks, cfg.l2, mode="eval")
        total += float(focal_loss(scores, labels, cfg.gamma).data) * len(batch)
        count += len(batch)
    return total / count


def _snapshot(model):
    return ({k: p.value.copy() for k, p in model.params.items()},
            {k: s.copy() for k, s in model.bn.items()})


def _restore(model, state):
    values, bn = state
    for k, p in model.params.items():
        p.value[...] = values[k]
    for k in model.bn:
        model.bn[k] = bn[k].copy()
