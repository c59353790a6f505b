"""Glancing sampler on/off over several seeds; prints mean token error rates."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging

import numpy as np

from deskasr.features import make_voices
from deskasr.data import ToyDataConfig, make_corpus, synthesize
from deskasr.pipeline import default_synth
from deskasr.paraformer import ParaformerConfig
from deskasr.train import AsrTrainConfig, evaluate, prepare, train_asr


def run(n_train: int, n_test: int, epochs: int, seeds, ratios, data_seed: int = 7) -> dict:
    synth = default_synth()
    voices = make_voices(synth)
    corpus = make_corpus(ToyDataConfig(n_train=n_train, n_test=n_test, seed=data_seed), synth)
    mc = ParaformerConfig()
    clean = dataclasses.replace(synth, noise=0.0)
    train = prepare([synthesize(r, clean, voices) for r in corpus.train], mc, keep_fbank=True)
    test = prepare([synthesize(r, synth, voices) for r in corpus.test], mc)
    ters: dict = {str(lam): [] for lam in ratios}
    for seed in seeds:
        for lam in ratios:
            cfg = AsrTrainConfig(epochs=epochs, glance_ratio=lam, augment_noise=synth.noise, seed=seed)
            model, _ = train_asr(train, mc, cfg)
            ter = evaluate(model, test)["ter"]
            ters[str(lam)].append(ter)
            logging.info("seed %d ratio %.2f TER %.2f", seed, lam, ter)
    return {"ter": ters, "mean": {k: float(np.mean(v)) for k, v in ters.items()}}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-train", type=int, default=600)
    ap.add_argument("--n-test", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    res = run(args.n_train, args.n_test, args.epochs, args.seeds, [0.5, 0.0])
    res["gap"] = res["mean"]["0.0"] - res["mean"]["0.5"]
    print(json.dumps(res, indent=1))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(res, f, indent=1)


if __name__ == "__main__":
    main()
