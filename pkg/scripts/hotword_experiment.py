"""Entity recall with and without hotword biasing on a trained toy model."""

from __future__ import annotations

import argparse
import json

from deskasr import pipeline as P
from deskasr.contextual import HotwordList, entity_metrics
from deskasr.data import synthesize
from deskasr.features import make_voices
from deskasr.paraformer import recognize
from deskasr.metrics import corpus_error_rate
from deskasr.train import prepare


def run(model_dir, data_seed: int = 7) -> dict:
    bundle = P.load_model(model_dir)
    synth = P.default_synth()
    corpus = P.default_dataset(seed=data_seed, synth=synth)
    voices = make_voices(synth)
    data = prepare([synthesize(r, synth, voices) for r in corpus.entity_test], bundle.asr.cfg)
    refs = [u.tokens for u in data]
    out = {}
    for name, hot in (("without", None), ("with", HotwordList.of(corpus.entities))):
        hyps = [recognize(bundle.asr, u.feats, hot).tokens for u in data]
        r, p, f = entity_metrics(hyps, refs, corpus.entities)
        out[name] = {"recall": r, "precision": p, "f1": f, "ter": corpus_error_rate(refs, hyps)}
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", required=True)
    ap.add_argument("--data-seed", type=int, default=7)
    args = ap.parse_args()
    print(json.dumps(run(args.model, args.data_seed), indent=1))


if __name__ == "__main__":
    main()
