"""Attention encoder-decoder with single-head additive location-aware attention.

Energies for decoder step ``n`` over encoder frames ``t``::

    e[t] = v . tanh(W_q h_n + W_k enc_t + W_f (F * alpha_{n-1})_t)

where ``F * alpha`` is a 1-D convolution of the previous attention column.
The vocab's blank id doubles as the sentence boundary: it is the first
decoder input and the end-of-sequence output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Corpus, Vocab
from .layers import (Encoder, GradCheckResult, VocabMismatch, grad_check, load_parameters, pad_frames,
                     pad_symbols, read_checkpoint, save_checkpoint, seed_everything, transfer_parameters)
from .targets import TargetSequence
from .training import TrainConfigMixin, train_loop

log = logging.getLogger(__name__)


class AttnError(ValueError):
    pass


@dataclass
class AttnConfig(TrainConfigMixin):
    frame_dim: int = 16
    encoder_layers: int = 2
    encoder_units: int = 48
    embed_dim: int = 32
    decoder_units: int = 64
    attention_dim: int = 32
    location_conv_width: int = 7
    location_channels: int = 8
    input_feeding: bool = True
    vocab_size: int = 0
    dropout: float = 0.1

    def validate(self) -> None:
        super().validate()
        for name in ("frame_dim", "encoder_layers", "encoder_units", "embed_dim", "decoder_units",
                     "attention_dim", "location_conv_width", "location_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.location_conv_width % 2 == 0:
            raise ValueError("location_conv_width must be odd")


@dataclass
class AttnDecodeResult:
    symbols: list[int]
    alpha: np.ndarray      # (T, len(symbols))
    truncated: bool


class AttnModel(nn.Module):
    VOCAB_PARAMS = {"embed.weight": 0, "out.weight": 0, "out.bias": 0}

    def __init__(self, config: AttnConfig, vocab: Vocab):
        super().__init__()
        config = replace(config, vocab_size=len(vocab))
        config.validate()
        self.config = config
        self.vocab = vocab
        self.eos = vocab.blank_id
        V = len(vocab)
        c = config
        self.encoder = Encoder(c.frame_dim, c.encoder_layers, c.encoder_units, c.dropout)
        E = self.encoder.out_dim
        self.embed = nn.Embedding(V, c.embed_dim)
        self.cell = nn.LSTMCell(c.embed_dim + (E if c.input_feeding else 0), c.decoder_units)
        self.query = nn.Linear(c.decoder_units, c.attention_dim, bias=False)
        self.key = nn.Linear(E, c.attention_dim)
        self.loc_conv = nn.Conv1d(1, c.location_channels, c.location_conv_width,
                                  padding=c.location_conv_width // 2, bias=False)
        self.loc_proj = nn.Linear(c.location_channels, c.attention_dim, bias=False)
        self.score = nn.Linear(c.attention_dim, 1, bias=False)
        self.hidden = nn.Linear(c.decoder_units + E, c.decoder_units)
        self.out = nn.Linear(c.decoder_units, V)
        self.drop = nn.Dropout(c.dropout)

    def encode(self, frames: Sequence[np.ndarray]):
        x, lengths = pad_frames(frames)
        enc = self.drop(self.encoder(x, lengths))
        mask = torch.arange(x.shape[1])[None, :] < lengths[:, None]
        alpha0 = mask.double() / lengths[:, None].double()
        B = x.shape[0]
        h = enc.new_zeros(B, self.config.decoder_units)
        state = (h, h.clone(), enc.new_zeros(B, enc.shape[2]), alpha0)
        return enc, self.key(enc), mask, state

    def step(self, y_prev: torch.Tensor, state, enc, keys, mask):
        h, c, ctx, alpha = state
        x = self.embed(y_prev)
        if self.config.input_feeding:
            x = torch.cat([x, ctx], dim=1)
        h, c = self.cell(x, (h, c))
        loc = self.loc_proj(self.loc_conv(alpha[:, None, :]).transpose(1, 2))
        e = self.score(torch.tanh(self.query(h)[:, None, :] + keys + loc)).squeeze(2)
        alpha = torch.softmax(e.masked_fill(~mask, float("-inf")), dim=1)
        ctx = torch.bmm(alpha[:, None, :], enc).squeeze(1)
        logits = self.out(torch.tanh(self.hidden(self.drop(torch.cat([h, ctx], dim=1)))))
        return logits, alpha, (h, c, ctx, alpha)

    def teacher_forced(self, frames, targets: Sequence[Sequence[int]]):
        """Logits (B, N+1, V) and attention (B, N+1, T) for inputs ``[eos] + y``."""
        enc, keys, mask, state = self.encode(frames)
        y, _ = pad_symbols(targets, fill=self.eos)
        inputs = torch.cat([torch.full((len(targets), 1), self.eos, dtype=torch.long), y], dim=1)
        logits, alphas = [], []
        for n in range(inputs.shape[1]):
            lg, a, state = self.step(inputs[:, n], state, enc, keys, mask)
            logits.append(lg)
            alphas.append(a)
        return torch.stack(logits, 1), torch.stack(alphas, 1)

    def batch_loss(self, frames, targets) -> torch.Tensor:
        """Mean per-symbol cross-entropy, end-of-sequence included."""
        logits, _ = self.teacher_forced(frames, targets)
        gold, glen = pad_symbols([list(t) + [self.eos] for t in targets], fill=-100)
        gold = gold[:, :logits.shape[1]]
        if gold.shape[1] < logits.shape[1]:
            pad = torch.full((gold.shape[0], logits.shape[1] - gold.shape[1]), -100, dtype=torch.long)
            gold = torch.cat([gold, pad], 1)
        return nn.functional.cross_entropy(logits.reshape(-1, logits.shape[2]), gold.reshape(-1),
                                           ignore_index=-100, reduction="sum") / glen.sum()

    @torch.no_grad()
    def decode_batch(self, frames: Sequence[np.ndarray], max_len: int) -> list[AttnDecodeResult]:
        enc, keys, mask, state = self.encode(frames)
        B = len(frames)
        y = torch.full((B,), self.eos, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        outs: list[list[int]] = [[] for _ in range(B)]
        cols: list[list[np.ndarray]] = [[] for _ in range(B)]
        for _ in range(max_len):
            logits, alpha, state = self.step(y, state, enc, keys, mask)
            y = logits.argmax(1)
            for b in range(B):
                if done[b]:
                    continue
                k = int(y[b])
                if k == self.eos:
                    done[b] = True
                else:
                    outs[b].append(k)
                    cols[b].append(alpha[b, :frames[b].shape[0]].numpy().copy())
            if done.all():
                break
        return [AttnDecodeResult(outs[b],
                                 np.stack(cols[b], 1) if cols[b] else np.zeros((frames[b].shape[0], 0)),
                                 not bool(done[b]))
                for b in range(B)]

    @torch.no_grad()
    def forced_attention_batch(self, frames, targets: Sequence[Sequence[int]]) -> list[np.ndarray]:
        _, alphas = self.teacher_forced(frames, targets)
        return [alphas[b, :len(t), :frames[b].shape[0]].numpy().T.copy() for b, t in enumerate(targets)]


def _symbols(target) -> list[int]:
    return list(target.symbols) if isinstance(target, TargetSequence) else [int(s) for s in target]


def decode_attn(model: AttnModel, frames: np.ndarray, max_len: int = 60) -> AttnDecodeResult:
    """Greedy decoding; ``alpha`` has one column per emitted symbol."""
    if len(frames) == 0:
        raise AttnError("frames must be nonempty")
    model.eval()
    return model.decode_batch([frames], max_len)[0]


def forced_attention(model: AttnModel, frames: np.ndarray, target) -> np.ndarray:
    """Teacher-forced attention matrix (T, N), one column per target symbol."""
    symbols = _symbols(target)
    V = len(model.vocab)
    if any(s < 0 or s >= V or s == model.eos for s in symbols):
        raise AttnError("target symbol outside model vocabulary")
    model.eval()
    return model.forced_attention_batch([frames], [symbols])[0]


def new_attn(config: AttnConfig, vocab: Vocab, init: AttnModel | None = None) -> AttnModel:
    seed_everything(config.seed)
    model = AttnModel(config, vocab)
    if init is not None:
        if not isinstance(init, AttnModel):
            raise VocabMismatch("init model is not an attention model")
        transfer_parameters(model, init, vocab, init.vocab, AttnModel.VOCAB_PARAMS)
    return model


def train_attn(corpus: Corpus, target_provider: Callable[[int], list], config: AttnConfig,
               init: AttnModel | None = None, epochs: int | None = None,
               progress: Callable[[int, float], None] | None = None):
    """Teacher-forced cross-entropy training; see ``train_rnnt`` for the init semantics."""
    model = new_attn(config, corpus.vocab, init)
    trace = train_loop(model, corpus, target_provider, model.config,
                       config.epochs if epochs is None else epochs, progress)
    return model, trace


def save_attn(model: AttnModel, path, extra: dict | None = None) -> None:
    save_checkpoint(path, "attn", model, model.config, model.vocab, extra)


def attn_from_checkpoint(doc: dict) -> AttnModel:
    model = AttnModel(AttnConfig(**doc["config"]), Vocab.from_dict(doc["vocab"]))
    load_parameters(model, doc["params"])
    return model


def load_attn(path) -> AttnModel:
    doc = read_checkpoint(path)
    if doc["model_type"] != "attn":
        raise ValueError(f"{path}: model_type is {doc['model_type']!r}, expected 'attn'")
    return attn_from_checkpoint(doc)


def grad_check_attn(model: AttnModel, batch, epsilon: float = 1e-4, n_coordinates: int = 200,
                    seed: int = 0) -> GradCheckResult:
    """``batch`` is ``(frames, targets)``; see ``layers.grad_check``."""
    frames, targets = batch
    return grad_check(model, frames, [_symbols(t) for t in targets], epsilon, n_coordinates, seed)
