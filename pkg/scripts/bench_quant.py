"""FLOAT32 vs INT8 pipeline wall time on synthetic sessions, alternating precisions."""

from __future__ import annotations

import argparse
import json

from deskasr import pipeline as P
from deskasr.features import make_voices
from deskasr.metrics import token_divergence
from deskasr.runtime import bench_rtf


def run(model_dir, n_sessions: int = 4, per_session: int = 10, rounds: int = 3, repeats: int = 2) -> dict:
    bundle = P.load_model(model_dir)
    synth = P.default_synth()
    voices = make_voices(synth)
    recs = P.default_dataset(synth=synth).test
    items = [(P.make_session(recs[per_session * i : per_session * (i + 1)], synth, voices, seed=i)[0], 16000) for i in range(n_sessions)]
    best: dict = {}
    toks = {}
    for _ in range(rounds):
        for prec in ("f32", "int8"):
            rep, outs = bench_rtf(bundle, items, prec, repeats=repeats)
            if prec not in best or rep.wall_seconds < best[prec].wall_seconds:
                best[prec] = rep
            toks[prec] = [t.token_ids() for t in outs]
    res = {k: v.to_json() for k, v in best.items()}
    res["speedup"] = 1 - best["int8"].wall_seconds / best["f32"].wall_seconds
    res["divergence_pct"] = token_divergence(toks["f32"], toks["int8"])
    return res


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", required=True)
    ap.add_argument("--sessions", type=int, default=4)
    ap.add_argument("--rounds", type=int, default=3)
    args = ap.parse_args()
    print(json.dumps(run(args.model, args.sessions, rounds=args.rounds), indent=1))


if __name__ == "__main__":
    main()
