"""Target sequences: build, parse, sort and randomize entity phrases.

A target is a flat symbol stream. Each entity word is followed by its label
(``B-<name>`` on the first word of a phrase, ``I-<name>`` on the rest) and the
stream ends with exactly one ``INTENT-<name>`` token::

    dallas B-toloc.city_name reno B-fromloc.city_name
    las B-stoploc.city_name vegas I-stoploc.city_name INTENT-flight
"""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Corpus, Utterance, Vocab


class Variant(str, enum.Enum):
    FULL = "full"
    SPOKEN = "spoken"
    ALPHABETIC = "alphabetic"
    RANDOM = "random"


class Phase(str, enum.Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


class TargetError(ValueError):
    pass


class ParseError(TargetError):
    def __init__(self, position: int, message: str):
        super().__init__(f"position {position}: {message}")
        self.position = position


@dataclass(frozen=True)
class SluPhrase:
    label_name: str
    spoken_token_ids: tuple[int, ...]
    original_index: int | None = None

    def key(self) -> tuple[str, tuple[int, ...]]:
        return (self.label_name, self.spoken_token_ids)


@dataclass
class TargetSequence:
    symbols: list[int]
    variant: Variant | str


@dataclass
class ParsedTarget:
    phrases: list[SluPhrase]
    spans: list[tuple[int, int]]          # [n_i, n_{i+1}) per phrase
    spoken_positions: list[list[int]]     # N_i per phrase
    intent: int | None
    carrier_positions: list[int] = field(default_factory=list)
    length: int = 0


def utterance_phrases(utt: Utterance, vocab: Vocab | None = None) -> list[SluPhrase]:
    """Entity phrases of ``utt`` in spoken order."""
    return [SluPhrase(e.label_name, tuple(utt.transcript[e.start:e.end]), i)
            for i, e in enumerate(utt.entities)]


def phrase_symbols(phrase: SluPhrase, vocab: Vocab) -> list[int]:
    out = []
    for k, w in enumerate(phrase.spoken_token_ids):
        out.append(w)
        out.append(vocab.b_label(phrase.label_name) if k == 0 else vocab.i_label(phrase.label_name))
    return out


def emit(phrases: Sequence[SluPhrase], intent: int, vocab: Vocab, variant) -> TargetSequence:
    symbols: list[int] = []
    for p in phrases:
        symbols += phrase_symbols(p, vocab)
    symbols.append(intent)
    return TargetSequence(symbols, variant)


def alphabetic(phrases: Sequence[SluPhrase]) -> list[SluPhrase]:
    """Sort by label name (byte-wise); stable, so equal labels keep their input order."""
    return sorted(phrases, key=lambda p: p.label_name.encode())


def random_order(phrases: Sequence[SluPhrase], rng: np.random.Generator) -> list[SluPhrase]:
    perm = rng.permutation(len(phrases))
    return [phrases[i] for i in perm]


def make_target(utt: Utterance, variant: Variant | str, vocab: Vocab,
                rng: np.random.Generator | None = None) -> TargetSequence:
    variant = Variant(variant)
    if (variant is Variant.RANDOM) != (rng is not None):
        raise TargetError("rng is required for, and only for, the random variant")
    if variant is Variant.FULL:
        symbols: list[int] = []
        label_at = {}
        for e in utt.entities:
            for k in range(e.start, e.end):
                label_at[k] = vocab.b_label(e.label_name) if k == e.start else vocab.i_label(e.label_name)
        for k, w in enumerate(utt.transcript):
            symbols.append(w)
            if k in label_at:
                symbols.append(label_at[k])
        symbols.append(utt.intent)
        return TargetSequence(symbols, variant)
    phrases = utterance_phrases(utt)
    if not phrases:
        raise TargetError(f"{utt.id}: no entities, cannot form an entity-only target")
    if variant is Variant.ALPHABETIC:
        phrases = alphabetic(phrases)
    elif variant is Variant.RANDOM:
        phrases = random_order(phrases, rng)
    return emit(phrases, utt.intent, vocab, variant)


def parse_prefix(symbols: Sequence[int], vocab: Vocab) -> tuple[ParsedTarget, ParseError | None]:
    """Parse as far as the grammar allows.

    Returns the parsed structure of the longest valid prefix and the error
    that stopped parsing (None if the whole sequence is valid). Spoken tokens
    not followed by a label are carrier words and belong to no phrase.
    """
    phrases: list[SluPhrase] = []
    spans: list[tuple[int, int]] = []
    spoken: list[list[int]] = []
    carriers: list[int] = []
    intent = None
    # open phrase state: label name, words, word positions, start position
    cur: list | None = None
    pending: int | None = None  # position of a spoken token awaiting its label

    def close(end: int):
        nonlocal cur
        if cur is not None:
            name, words, pos, start = cur
            phrases.append(SluPhrase(name, tuple(words)))
            spans.append((start, end))
            spoken.append(pos)
            cur = None

    def result(err: ParseError | None, n: int):
        return ParsedTarget(phrases, spans, spoken, intent, carriers, n), err

    for n, s in enumerate(symbols):
        s = int(s)
        if intent is not None:
            close(n)
            return result(ParseError(n, "symbol after intent token"), n)
        if vocab.is_spoken(s):
            if pending is not None:
                # previous spoken token had no label: carrier word
                close(pending)
                carriers.append(pending)
            pending = n
        elif vocab.is_label(s):
            if pending is None:
                close(n)
                return result(ParseError(n, "label token not preceded by a spoken token"), n - 1 if n else 0)
            tag = vocab.tokens[s]
            prefix, name = tag[:2], tag[2:]
            if prefix == "B-":
                close(pending)
                cur = [name, [int(symbols[pending])], [pending], pending]
            else:
                if cur is None or cur[0] != name or cur[2][-1] != pending - 2:
                    close(pending)
                    return result(ParseError(n, f"{tag} without a preceding B-{name}"), pending)
                cur[1].append(int(symbols[pending]))
                cur[2].append(pending)
            pending = None
        elif vocab.is_intent(s):
            if pending is not None:
                close(pending)
                carriers.append(pending)
                pending = None
            close(n)
            intent = s
        else:
            close(pending if pending is not None else n)
            return result(ParseError(n, f"symbol {s} is not a target token"), n)
    if pending is not None:
        close(pending)
        carriers.append(pending)
    close(len(symbols))
    if intent is None:
        return result(ParseError(len(symbols), "missing intent token"), len(symbols))
    return result(None, len(symbols))


def parse_target(symbols: Sequence[int], vocab: Vocab) -> ParsedTarget:
    parsed, err = parse_prefix(symbols, vocab)
    if err is not None:
        raise err
    return parsed


def example_rng(seed: int, epoch: int, utt_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, zlib.crc32(utt_id.encode())])


def epoch_targets(corpus: Corpus, phase: Phase | str, epoch: int, seed: int) -> list[TargetSequence]:
    """Targets for one epoch: fresh random orders when pretraining, alphabetic when fine-tuning."""
    phase = Phase(phase)
    if not corpus.utterances:
        raise TargetError("empty corpus")
    if phase is Phase.FINETUNE:
        return [make_target(u, Variant.ALPHABETIC, corpus.vocab) for u in corpus.utterances]
    return [make_target(u, Variant.RANDOM, corpus.vocab, example_rng(seed, epoch, u.id))
            for u in corpus.utterances]
