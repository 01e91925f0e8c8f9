"""Finite-difference gradient checks of both model families at default size."""

import argparse
import time

from slu.attn_model import AttnConfig, grad_check_attn, new_attn
from slu.corpus import CorpusSpec, generate_corpus
from slu.rnnt_model import RnntConfig, grad_check_rnnt, new_rnnt
from slu.targets import make_target


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--coords", type=int, default=200)
    ap.add_argument("--epsilon", type=float, default=1e-4)
    args = ap.parse_args()
    print("seed family max_rel max_abs coords seconds")
    for seed in range(args.seeds):
        corpus = generate_corpus(CorpusSpec(n_utterances=3, seed=seed))
        batch = ([u.frames for u in corpus.utterances],
                 [make_target(u, "spoken", corpus.vocab).symbols for u in corpus.utterances])
        for family, check, model in (("rnnt", grad_check_rnnt, new_rnnt(RnntConfig(seed=seed), corpus.vocab)),
                                     ("attn", grad_check_attn, new_attn(AttnConfig(seed=seed), corpus.vocab))):
            start = time.perf_counter()
            r = check(model, batch, args.epsilon, args.coords, seed)
            print(f"{seed} {family} {r.max_relative_error:.2e} {r.max_absolute_error:.2e} {r.n_coordinates} "
                  f"{time.perf_counter() - start:.1f}")


if __name__ == "__main__":
    main()
