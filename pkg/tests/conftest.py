import pytest
import torch

from slu.corpus import Corpus, CorpusSpec, EntityAnnotation, Utterance, build_vocab, generate_corpus

torch.set_num_threads(1)

# acceptance verdicts, printed one per line at the end of the session
_VERDICTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    def record(criterion: int, passed: bool, detail: str) -> bool:
        _VERDICTS[criterion] = (bool(passed), detail)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def vocab():
    return build_vocab(CorpusSpec())


def make_utt(vocab, words, entities, intent="flight", uid="u0"):
    """Utterance from word strings and (label, start, end) triples; frames are dummies."""
    import numpy as np
    ids = vocab.ids(words)
    spans = [(2 * i, 2 * i + 2) for i in range(len(ids))]
    return Utterance(uid, np.zeros((2 * len(ids), 16)), ids,
                     [EntityAnnotation(*e) for e in entities], vocab.intent_id(intent), spans)


@pytest.fixture
def paper_utt(vocab):
    words = "i want a flight to dallas from reno that makes a stop in las vegas".split()
    return make_utt(vocab, words, [("toloc.city_name", 5, 6), ("fromloc.city_name", 7, 8),
                                   ("stoploc.city_name", 13, 15)])


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(CorpusSpec(n_utterances=40, seed=3))
