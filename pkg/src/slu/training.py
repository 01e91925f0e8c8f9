"""Minibatch training loop shared by both model families."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .corpus import Corpus
from .layers import check_finite

log = logging.getLogger(__name__)


@dataclass
class TrainConfigMixin:
    learning_rate: float = 1e-2
    batch_size: int = 16
    epochs: int = 10
    grad_clip: float = 5.0
    seed: int = 0

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")


def bucketed_batches(rng: np.random.Generator, lengths, batch_size: int, bucket: int = 4) -> list[np.ndarray]:
    """Shuffle, sort by length within windows of ``bucket`` batches, shuffle the batches."""
    order = rng.permutation(len(lengths))
    lengths = np.asarray(lengths)
    batches = []
    w = batch_size * bucket
    for i in range(0, len(order), w):
        win = order[i:i + w]
        win = win[np.argsort(lengths[win], kind="stable")]
        batches += [win[j:j + batch_size] for j in range(0, len(win), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def train_loop(model, corpus: Corpus, target_provider: Callable[[int], list], config, epochs: int,
               progress: Callable[[int, float], None] | None = None) -> list[float]:
    """Adam over shuffled minibatches; returns the per-epoch mean training loss."""
    if not corpus.utterances:
        raise ValueError("cannot train on an empty corpus")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    frames = [u.frames for u in corpus.utterances]
    n = len(frames)
    trace = []
    for epoch in range(1, epochs + 1):
        targets = [list(t.symbols) for t in target_provider(epoch)]
        if len(targets) != n:
            raise ValueError(f"epoch {epoch}: {len(targets)} targets for {n} utterances")
        model.train()
        total = 0.0
        for idx in bucketed_batches(rng, [f.shape[0] for f in frames], config.batch_size):
            loss = model.batch_loss([frames[j] for j in idx], [targets[j] for j in idx])
            check_finite(model, loss, f"epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            total += float(loss.detach()) * len(idx)
        check_finite(model, total, f"epoch {epoch}")
        trace.append(total / n)
        log.info("epoch %d loss %.4f", epoch, trace[-1])
        if progress:
            progress(epoch, trace[-1])
    model.eval()
    return trace
