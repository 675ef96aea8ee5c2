"""Training the embedding network against watershed labels with triplet loss.

Each epoch: embed every vertex, reweight the graph, draw seeds from the
training pixels, propagate them with a single watershed, mine triplets from
the propagated labels and take SGD steps on the triplet loss.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .classifier import classify_single, mine_triplets, stratified_sample
from .graph import UNLABELED
from .graph_build import reweight

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    alpha: float = 0.2
    seed_fraction: float = 0.4
    lr_base: float = 0.01
    lr_max: float = 0.1
    cycle_length: int = None  # iterations per half cycle; None = 4 epochs' worth
    embed_dim: int = 64
    arch: str = "mlp"
    triplet_pool: str = "all"
    fixed_seeds: bool = False
    stop_tolerance: float = 1e-4
    patience: int = 5
    embed_batch: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.lr_base > self.lr_max:
            raise ValueError("lr_base must not exceed lr_max")
        if not 0 < self.seed_fraction <= 1:
            raise ValueError("seed_fraction must be in (0, 1]")
        if self.triplet_pool not in ("all", "train-only"):
            raise ValueError(f"unknown triplet pool {self.triplet_pool!r}")
        if self.cycle_length is not None and self.cycle_length < 1:
            raise ValueError("cycle_length must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    out_of_box: float
    active_fraction: float
    n_seeds: int
    n_triplets: int
    lr_last: float
    skipped: bool = False

    def to_dict(self):
        return asdict(self)


def triplet_loss(emb_a, emb_p, emb_n, alpha):
    """Hinge ``max(0, |a - p| - |a - n| + alpha)`` per row, with gradients.

    Accepts single vectors or ``(n, d)`` batches. Inactive rows get zero
    gradient; a zero-length difference contributes a zero subgradient.

    Returns ``(loss, grad_a, grad_p, grad_n)``; ``loss`` is per row.
    """
    a, p, n = (np.asarray(x, dtype=np.float64) for x in (emb_a, emb_p, emb_n))
    if not (a.shape == p.shape == n.shape):
        raise ValueError(f"shape mismatch: {a.shape}, {p.shape}, {n.shape}")
    for x in (a, p, n):
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("non-finite embedding in triplet loss")
    single = a.ndim == 1
    a, p, n = np.atleast_2d(a), np.atleast_2d(p), np.atleast_2d(n)
    dp_vec, dn_vec = a - p, a - n
    dp = np.sqrt((dp_vec ** 2).sum(axis=1))
    dn = np.sqrt((dn_vec ** 2).sum(axis=1))
    raw = dp - dn + alpha
    loss = np.maximum(raw, 0.0)
    active = raw > 0
    up = np.divide(dp_vec, dp[:, None], out=np.zeros_like(dp_vec), where=dp[:, None] > 0)
    un = np.divide(dn_vec, dn[:, None], out=np.zeros_like(dn_vec), where=dn[:, None] > 0)
    up *= active[:, None]
    un *= active[:, None]
    ga, gp, gn = up - un, -up, un
    if single:
        return float(loss[0]), ga[0], gp[0], gn[0]
    return loss, ga, gp, gn


def cyclic_lr(iteration, lr_base, lr_max, cycle_length):
    """Triangular cyclic learning rate; ``cycle_length`` is the half period."""
    if cycle_length < 1:
        raise ValueError("cycle_length must be >= 1")
    pos = (iteration % (2 * cycle_length)) / cycle_length
    frac = pos if pos <= 1 else 2.0 - pos
    return lr_base + (lr_max - lr_base) * frac


def embed_all(model, source, batch=1024):
    """Eval-mode embeddings for every sample of ``source``."""
    model.eval()
    n = len(source)
    out = np.empty((n, model.output_dim), dtype=np.float64)
    for lo in range(0, n, batch):
        idx = np.arange(lo, min(lo + batch, n))
        out[lo:lo + len(idx)] = model.forward(source(idx))
    return out


def sgd_step(model, source, batch, alpha, lr):
    """One SGD step on a triplet batch; returns per-triplet losses."""
    model.train()
    m = len(batch)
    idx = np.concatenate([batch.anchors, batch.positives, batch.negatives])
    out = model.forward(source(idx))
    loss, ga, gp, gn = triplet_loss(out[:m], out[m:2 * m], out[2 * m:], alpha)
    if not np.all(np.isfinite(loss)):
        raise FloatingPointError("non-finite triplet loss")
    grad, _ = model.backward(np.concatenate([ga, gp, gn]) / m)
    model.params -= lr * grad
    return loss


def iterations_per_epoch(n_pool, batch_size):
    return max(1, math.ceil(n_pool / batch_size))


def train(source, graph, model, train_labels, cfg: TrainConfig, callback=None,
          start_iteration=0):
    """Run the watershed/triplet training loop.

    Parameters
    ----------
    source : callable
        ``source(vertex_ids)`` returns the network input batch for those
        vertices; ``len(source)`` is the vertex count.
    graph : Graph
        Fixed edge set; its weights are overwritten every epoch.
    model : nn.Model
    train_labels : ndarray (n_vertices,)
        Class id (0-based) at training vertices, ``UNLABELED`` elsewhere.
    cfg : TrainConfig
    callback : callable, optional
        Called with each :class:`EpochRecord`.

    Returns
    -------
    model, records
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if len(train_labels) != graph.n_vertices or len(source) != graph.n_vertices:
        raise ValueError("source, graph and train_labels must cover the same vertices")
    train_ids = np.flatnonzero(train_labels != UNLABELED)
    classes = np.unique(train_labels[train_ids])
    if len(classes) < 2:
        raise ValueError("training needs labeled pixels from at least two classes")
    n_classes = int(classes.max()) + 1
    empty = sorted(set(range(n_classes)) - set(classes.tolist()))
    if empty:
        raise ValueError(f"training classes without pixels: {empty}")

    ss = np.random.SeedSequence(cfg.seed)
    seed_rng, mine_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    pool_size = graph.n_vertices if cfg.triplet_pool == "all" else len(train_ids)
    n_iter = iterations_per_epoch(pool_size, cfg.batch_size)
    cycle = cfg.cycle_length or 4 * n_iter
    iteration = start_iteration
    fixed = stratified_sample(train_labels, cfg.seed_fraction, seed_rng) if cfg.fixed_seeds else None

    records = []
    calm = 0
    for epoch in range(cfg.epochs):
        emb = embed_all(model, source, cfg.embed_batch)
        reweight(graph, emb)
        seeds = fixed if fixed is not None else stratified_sample(
            train_labels, cfg.seed_fraction, seed_rng)
        ws = classify_single(graph, seeds)
        held_out = (train_labels != UNLABELED) & (seeds == UNLABELED)
        oob = float(np.mean(ws[held_out] == train_labels[held_out])) if held_out.any() else 1.0

        pool = ws.copy()
        if cfg.triplet_pool == "train-only":
            pool[train_labels == UNLABELED] = UNLABELED
        present = np.unique(pool[pool != UNLABELED])
        losses = []
        lr = cyclic_lr(iteration, cfg.lr_base, cfg.lr_max, cycle)
        skipped = len(present) < 2
        if skipped:
            log.warning("epoch %d: watershed produced a single class; skipping SGD", epoch)
        else:
            for _ in range(n_iter):
                lr = cyclic_lr(iteration, cfg.lr_base, cfg.lr_max, cycle)
                batch = mine_triplets(pool, cfg.batch_size, mine_rng)
                if len(batch) == 0:
                    continue
                losses.append(sgd_step(model, source, batch, cfg.alpha, lr))
                iteration += 1
        all_losses = np.concatenate(losses) if losses else np.zeros(0)
        if not np.all(np.isfinite(model.params)):
            raise FloatingPointError(f"epoch {epoch}: parameters became non-finite (lr={lr})")
        rec = EpochRecord(
            epoch=epoch,
            mean_loss=float(all_losses.mean()) if len(all_losses) else 0.0,
            out_of_box=oob,
            active_fraction=float((all_losses > 0).mean()) if len(all_losses) else 0.0,
            n_seeds=int((seeds != UNLABELED).sum()),
            n_triplets=int(len(all_losses)),
            lr_last=float(lr),
            skipped=bool(skipped),
        )
        records.append(rec)
        log.info("epoch %d loss %.5f oob %.4f active %.3f", epoch, rec.mean_loss,
                 rec.out_of_box, rec.active_fraction)
        if callback is not None:
            callback(rec)
        if rec.out_of_box == 1.0 and rec.mean_loss < cfg.stop_tolerance and not skipped:
            calm += 1
            if calm >= cfg.patience:
                break
        else:
            calm = 0
    model.eval()
    model.iteration = iteration
    return model, records
