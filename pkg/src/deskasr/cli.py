"""Command line entry point: ``deskasr <subcommand> ...``."""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("deskasr")


def _json_out(path, obj) -> None:
    text = json.dumps(obj, indent=1, ensure_ascii=False) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _wav_list(pattern: str) -> list[str]:
    files = sorted(glob.glob(pattern))
    if not files:
        raise SystemExit(f"no files match {pattern!r}")
    return files


def cmd_train_toy(args) -> int:
    from . import pipeline as P
    from .data import read_jsonl, write_jsonl

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = P.ToyTrainConfig()
    if args.epochs is not None:
        cfg.asr.epochs = args.epochs
    if args.data:
        records = read_jsonl(args.data, cfg.model.vocab_size)
        test = read_jsonl(args.test, cfg.model.vocab_size) if args.test else None
    else:
        corpus = P.default_dataset(seed=args.data_seed)
        records, test = corpus.train, corpus.test
        write_jsonl(out / "train.jsonl", records)
        write_jsonl(out / "test.jsonl", test)
        log.info("wrote the generated corpus to %s", out)
    bundle, result = P.train_toy(records, cfg, seed=args.seed, test_records=test, dump_dir=out)
    P.save_model(bundle, out)
    P.write_log(out / "train_log.json", result)
    summary = {k: result[k] for k in ("test_ter", "test_aas_ms", "seconds") if k in result}
    print(json.dumps(summary))
    return 0


def _load(args):
    from .pipeline import load_model

    return load_model(args.model)


def _read_audio(path):
    from .features import read_wav

    pcm, sr = read_wav(path)
    return pcm, sr


def cmd_transcribe(args) -> int:
    from . import pipeline as P
    from .contextual import read_hotword_file

    bundle = _load(args)
    pcm, sr = _read_audio(args.wav)
    hot = read_hotword_file(args.hotwords, bundle.symbols) if args.hotwords else None
    plan = None
    if args.precision == "amp":
        plan_file = Path(args.model) / "amp_plan.json"
        if plan_file.exists():
            plan = P.plans_from_json(json.loads(plan_file.read_text()))
    P.apply_precision(bundle, args.precision, args.sqnr_db, calibration=[pcm], plan=plan, sample_rate=sr)
    tr = P.run_pipeline(pcm, bundle, hot, sample_rate=sr)
    _json_out(args.out, tr.to_json(bundle.symbols))
    return 0


def cmd_vad(args) -> int:
    from .features import fbank
    from .vad import VadConfig, score_frames, segment_offline

    bundle = _load(args)
    pcm, sr = _read_audio(args.wav)
    cfg = VadConfig(
        speech_threshold=args.threshold,
        min_speech_ms=args.min_speech_ms,
        max_silence_in_speech_ms=args.max_silence_ms,
        max_segment_ms=args.max_segment_ms,
        pad_ms=args.pad_ms,
    )
    frames = fbank(pcm, sr).frames
    segs = segment_offline(score_frames(frames, bundle.vad), cfg) if len(frames) else []
    lines = "".join(json.dumps(s.to_json()) + "\n" for s in segs)
    if args.out:
        Path(args.out).write_text(lines, encoding="utf-8")
    else:
        sys.stdout.write(lines)
    return 0


def cmd_punctuate(args) -> int:
    from .kernels import Rng
    from .punct import StreamConfig, StreamState, decode_offline, render_text, stream_flush, stream_step

    bundle = _load(args)
    lookup = {s: i for i, s in enumerate(bundle.symbols)}
    text = Path(args.input).read_text(encoding="utf-8") if args.input != "-" else sys.stdin.read()
    tokens = []
    for lineno, line in enumerate(text.splitlines(), 1):
        sym = line.strip()
        if not sym:
            continue
        if sym not in lookup:
            raise SystemExit(f"{args.input}:{lineno}: unknown token {sym!r}")
        tokens.append(lookup[sym])
    if not tokens:
        raise SystemExit("no tokens to punctuate")
    if not args.streaming:
        committed = decode_offline(tokens, bundle.punct)
    else:
        cfg = StreamConfig(force_after=args.force_after, max_history=args.max_history)
        rng = Rng(args.seed)
        state = StreamState(max_history=cfg.max_history)
        committed, pos = [], 0
        while pos < len(tokens):
            n = int(rng.integers(1, args.max_chunk + 1))
            got, state = stream_step(tokens[pos : pos + n], state, bundle.punct, cfg)
            pos += n
            committed.extend(got)
            sys.stderr.write(f"+{n:<3d} tokens -> committed {len(committed)}/{pos}: {render_text(got, bundle.symbols)}\n")
        committed.extend(stream_flush(state, bundle.punct))
        if state.dropped == 0:
            same = committed == decode_offline(tokens, bundle.punct)
            sys.stderr.write(f"streaming commits {'equal' if same else 'DIFFER FROM'} the offline decode\n")
    out = render_text(committed, bundle.symbols) + "\n"
    if args.out:
        Path(args.out).write_text(out, encoding="utf-8")
    else:
        sys.stdout.write(out)
    return 0


def cmd_quantize(args) -> int:
    from . import pipeline as P

    bundle = _load(args)
    pcms = []
    for f in _wav_list(args.calib):
        pcm, sr = _read_audio(f)
        if sr != 16000:
            raise SystemExit(f"{f}: calibration audio must be 16 kHz")
        pcms.append(pcm)
    plans = P.amp_plans(bundle, pcms, args.sqnr_db)
    out = Path(args.out) if args.out else Path(args.model) / "amp_plan.json"
    out.write_text(json.dumps(P.plans_to_json(plans), indent=1) + "\n", encoding="utf-8")
    for name, plan in plans.items():
        print(f"{name}: {plan.n_int8()}/{len(plan.decisions)} layers INT8 at >= {args.sqnr_db} dB")
        for layer, prec in plan.decisions.items():
            print(f"  {layer:36s} {prec:8s} {plan.sqnr_db.get(layer, float('nan')):7.1f} dB")
    return 0


def cmd_bench(args) -> int:
    from . import pipeline as P
    from .runtime import bench_rtf

    bundle = _load(args)
    plan = None
    if args.precision == "amp" and (Path(args.model) / "amp_plan.json").exists():
        plan = P.plans_from_json(json.loads((Path(args.model) / "amp_plan.json").read_text()))
    report, _ = bench_rtf(bundle, _wav_list(args.wavs), args.precision, args.sqnr_db, repeats=args.repeats, plan=plan)
    d = report.to_json()
    print(f"{report.precision}: {report.n_files} files, {report.audio_seconds:.1f} s audio, wall {report.wall_seconds:.3f} s, RTF {report.rtf:.4f}")
    for k, v in report.stage_rtf().items():
        print(f"  {k:9s} RTF {v:.5f}")
    if args.report:
        _json_out(args.report, d)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deskasr", description="Toy non-autoregressive speech recognition pipeline")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train-toy", help="train recogniser, VAD and punctuation models on synthetic speech")
    p.add_argument("--data", help="JSON-lines training records (generated when omitted)")
    p.add_argument("--test", help="JSON-lines held-out records")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=7)
    p.add_argument("--epochs", type=int)
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("transcribe", help="VAD, recognition, timestamps and punctuation for one WAV")
    p.add_argument("--model", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--hotwords")
    p.add_argument("--precision", choices=["f32", "int8", "amp"], default="f32")
    p.add_argument("--sqnr-db", type=float, default=30.0)
    p.add_argument("--out", default="-")
    p.set_defaults(fn=cmd_transcribe)

    p = sub.add_parser("vad", help="speech segments as JSON lines")
    p.add_argument("--model", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-speech-ms", type=int, default=100)
    p.add_argument("--max-silence-ms", type=int, default=300)
    p.add_argument("--max-segment-ms", type=int, default=15000)
    p.add_argument("--pad-ms", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_vad)

    p = sub.add_parser("punctuate", help="punctuate token-per-line text")
    p.add_argument("--model", required=True)
    p.add_argument("--input", default="-")
    p.add_argument("--streaming", action="store_true", help="replay the input in random chunks")
    p.add_argument("--max-chunk", type=int, default=8)
    p.add_argument("--force-after", type=int, default=40)
    p.add_argument("--max-history", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_punctuate)

    p = sub.add_parser("quantize", help="choose INT8/FLOAT32 per layer from calibration audio")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True, help="glob of calibration WAVs")
    p.add_argument("--sqnr-db", type=float, default=30.0)
    p.add_argument("--out", help="plan file (default: MODEL/amp_plan.json)")
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("bench", help="single-threaded batch-1 real-time factor")
    p.add_argument("--model", required=True)
    p.add_argument("--wavs", required=True)
    p.add_argument("--precision", choices=["f32", "int8", "amp"], default="f32")
    p.add_argument("--sqnr-db", type=float, default=30.0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--report")
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"deskasr: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
