"""Set-of-entities slot F1, intent accuracy and word error rate."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

from .corpus import Corpus, Utterance, Vocab
from .targets import ParsedTarget, parse_prefix, utterance_phrases

EntityTuple = tuple[str, tuple[str, ...]]


class EvalError(ValueError):
    pass


@dataclass
class ScoreReport:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    intent_accuracy: float | None = None
    wer: float | None = None
    true_positives: int = 0
    predicted: int = 0
    reference: int = 0
    unparsed_utterances: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _check_ids(pred_ids: Iterable[str], ref_ids: Iterable[str]) -> list[str]:
    pred_ids, ref_ids = list(pred_ids), list(ref_ids)
    for name, ids in (("predictions", pred_ids), ("references", ref_ids)):
        if len(set(ids)) != len(ids):
            raise EvalError(f"duplicate utterance ids in {name}")
    if set(pred_ids) != set(ref_ids):
        missing = sorted(set(ref_ids) ^ set(pred_ids))
        raise EvalError(f"utterance ids do not align, e.g. {missing[:3]}")
    return sorted(ref_ids)


def _as_pairs(x) -> list:
    return list(x.items()) if isinstance(x, Mapping) else list(x)


def slot_f1(predictions, references) -> ScoreReport:
    """Micro-averaged F1 over per-utterance multisets of (label, value) tuples.

    Both arguments map utterance id to an iterable of entity tuples (a dict,
    or a sequence of ``(id, entities)`` pairs, where duplicate ids are an error).
    """
    pred, ref = _as_pairs(predictions), _as_pairs(references)
    ids = _check_ids([k for k, _ in pred], [k for k, _ in ref])
    pred, ref = dict(pred), dict(ref)
    tp = n_pred = n_ref = 0
    for i in ids:
        p, r = Counter(map(_freeze, pred[i])), Counter(map(_freeze, ref[i]))
        tp += sum((p & r).values())
        n_pred += sum(p.values())
        n_ref += sum(r.values())
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_ref if n_ref else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ScoreReport(precision, recall, f1, true_positives=tp, predicted=n_pred, reference=n_ref)


def _freeze(entity) -> EntityTuple:
    label, value = entity
    value = tuple(value.split()) if isinstance(value, str) else tuple(value)
    if not value:
        raise EvalError(f"empty value for label {label}")
    return (label, value)


def intent_accuracy(predictions, references) -> float:
    """Fraction of utterances whose predicted intent equals the reference; None counts as wrong."""
    pred, ref = _as_pairs(predictions), _as_pairs(references)
    ids = _check_ids([k for k, _ in pred], [k for k, _ in ref])
    if not ids:
        raise EvalError("no utterances")
    pred, ref = dict(pred), dict(ref)
    return sum(pred[i] is not None and pred[i] == ref[i] for i in ids) / len(ids)


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def wer(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    if len(hypotheses) != len(references):
        raise EvalError("hypothesis and reference counts differ")
    n_ref = sum(len(r) for r in references)
    if not references or n_ref == 0:
        raise EvalError("empty reference corpus")
    return sum(edit_distance(h, r) for h, r in zip(hypotheses, references)) / n_ref


# --- bridging symbol sequences and corpora ---------------------------------

def entities_of(parsed: ParsedTarget, vocab: Vocab) -> list[EntityTuple]:
    return [(p.label_name, tuple(vocab.strings(p.spoken_token_ids))) for p in parsed.phrases]


def reference_entities(utt: Utterance, vocab: Vocab) -> list[EntityTuple]:
    return [(p.label_name, tuple(vocab.strings(p.spoken_token_ids))) for p in utterance_phrases(utt)]


def spoken_words(symbols: Sequence[int], vocab: Vocab) -> list[str]:
    return [vocab.tokens[s] for s in symbols if vocab.is_spoken(s)]


def score_predictions(pred_symbols: Mapping[str, Sequence[int]], corpus: Corpus,
                      metrics: Sequence[str] = ("f1", "intent", "wer")) -> ScoreReport:
    """Score decoded symbol sequences against a reference corpus.

    A sequence that fails to parse contributes the entities and intent of its
    valid prefix and is counted in ``unparsed_utterances``. WER compares the
    spoken tokens of the hypothesis with the full reference transcript.
    """
    vocab = corpus.vocab
    ids = _check_ids(pred_symbols.keys(), [u.id for u in corpus.utterances])
    by_id = {u.id: u for u in corpus.utterances}
    pred_ents, ref_ents, pred_int, ref_int, hyps, refs = {}, {}, {}, {}, [], []
    bad = 0
    for i in ids:
        parsed, err = parse_prefix(pred_symbols[i], vocab)
        bad += err is not None
        pred_ents[i] = entities_of(parsed, vocab)
        ref_ents[i] = reference_entities(by_id[i], vocab)
        pred_int[i] = vocab.tokens[parsed.intent] if parsed.intent is not None else None
        ref_int[i] = vocab.tokens[by_id[i].intent]
        hyps.append(spoken_words(pred_symbols[i], vocab))
        refs.append(vocab.strings(by_id[i].transcript))
    report = slot_f1(pred_ents, ref_ents) if "f1" in metrics else ScoreReport()
    if "intent" in metrics:
        report.intent_accuracy = intent_accuracy(pred_int, ref_int)
    if "wer" in metrics:
        report.wer = wer(hyps, refs)
    report.unparsed_utterances = bad
    return report
