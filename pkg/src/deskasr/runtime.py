"""INT8 inference: weight/activation quantization, mixed-precision plans, RTF benchmarking."""

from __future__ import annotations

import ctypes
import hashlib
import logging
import math
import os
import shutil
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import Linear, collect_linears

log = logging.getLogger(__name__)

INT8, FLOAT32 = "INT8", "FLOAT32"
QMAX = 127
# |q_x|,|q_w| <= 127, so an int32 sum of k products stays below 2**31 - 1 while
# k <= (2**31 - 1) // 127**2 = 133143.  The native kernel adds a +128 shift and
# is limited to k <= 66311 (see qkernel.c); both limits are enforced.
MAX_K = (2**31 - 1) // (QMAX * QMAX)
MAX_K_NATIVE = (2**31 - 1) // (255 * QMAX)
# floor for scales of nonzero rows so 1/scale stays finite when max|row| is subnormal
TINY = np.finfo(np.float32).tiny


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest, ties away from zero (exact: uses the fractional part)."""
    r = np.trunc(v)
    d = v - r
    return r + (d >= 0.5) - (d <= -0.5)


@dataclass
class QuantTensor:
    qdata: np.ndarray  # int8 [out, in]
    scales: np.ndarray  # float32 [out], one per output channel
    shape: tuple

    def __post_init__(self):
        if self.qdata.dtype != np.int8 or self.qdata.ndim != 2:
            raise TypeError("qdata must be a 2-D int8 array")
        if np.any(self.qdata == -128):
            raise ValueError("qdata outside [-127, 127]")
        if self.scales.shape != (self.qdata.shape[0],) or not np.all(self.scales > 0):
            raise ValueError("scales must be positive, one per row")

    def dequantize(self) -> np.ndarray:
        return (self.qdata.astype(np.float32) * self.scales[:, None]).reshape(self.shape)


def quantize_int8(weights) -> QuantTensor:
    """Symmetric per-output-channel quantization: scale = max|row| / 127 (1 for a zero row)."""
    w = np.asarray(weights)
    shape = w.shape
    if w.ndim != 2:
        raise ValueError("quantize_int8 expects a [out, in] matrix")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    w = w.astype(np.float32)
    mx = np.abs(w).max(axis=1) if w.shape[1] else np.zeros(w.shape[0], np.float32)
    scales = np.where(mx > 0, np.maximum(mx / np.float32(QMAX), TINY), np.float32(1.0)).astype(np.float32)
    # float64 division of two float32 values cannot land within rounding distance of a tie
    v = w.astype(np.float64) / scales.astype(np.float64)[:, None]
    q = np.clip(round_half_away(v), -QMAX, QMAX).astype(np.int8)
    return QuantTensor(q, scales, shape)


def quantize_activations(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dynamic per-row quantization with the same arithmetic as the native kernel."""
    x = np.asarray(x, np.float32)
    mx = np.abs(x).max(axis=-1) if x.shape[-1] else np.zeros(x.shape[:-1], np.float32)
    s = np.where(mx > 0, np.maximum(mx / np.float32(QMAX), TINY), np.float32(1.0)).astype(np.float32)
    inv = (np.float32(1.0) / s).astype(np.float32)
    v = x * inv[..., None]
    q = np.clip(round_half_away(v), -QMAX, QMAX).astype(np.int8)
    return q, s


def int_products(xq: np.ndarray, wq: np.ndarray) -> np.ndarray:
    """Exact sum_k xq[i,k]*wq[j,k] as int32.

    Uses a floating matmul whose mantissa holds every partial sum exactly:
    float32 while 127*127*k < 2**24, float64 beyond that.
    """
    k = xq.shape[-1]
    if k > MAX_K:
        raise OverflowError(f"inner dimension {k} could overflow an int32 accumulator")
    dt = np.float32 if QMAX * QMAX * k < 2**24 else np.float64
    return (xq.astype(dt) @ wq.astype(dt).T).astype(np.int32)


def qmatmul(x, qw: QuantTensor, bias=None, backend: str = "auto") -> np.ndarray:
    """x [..., in] times the quantized [out, in] weights, returned in float32."""
    x = np.asarray(x, np.float32)
    if x.shape[-1] != qw.shape[1]:
        raise ValueError(f"qmatmul: input dim {x.shape[-1]} vs weight in-dim {qw.shape[1]}")
    return QLinear(qw, bias, backend=backend)(x)


class QLinear:
    """Callable INT8 replacement for a Linear's forward on plain arrays."""

    def __init__(self, qw: QuantTensor, bias=None, backend: str = "auto"):
        self.qw = qw
        self.n, self.k = qw.qdata.shape
        if self.k > MAX_K:
            raise OverflowError(f"inner dimension {self.k} could overflow an int32 accumulator")
        self.bias = None if bias is None else np.ascontiguousarray(np.asarray(bias, np.float32))
        self.lib = native_kernel() if backend in ("auto", "native") else None
        if backend == "native" and self.lib is None:
            raise RuntimeError("native INT8 kernel unavailable on this machine")
        if self.k > MAX_K_NATIVE:
            self.lib = None
        self.backend = "native" if self.lib is not None else "numpy"
        if self.lib is not None:
            self._pack()

    def _pack(self) -> None:
        n, k = self.n, self.k
        kp = (k + 3) // 4 * 4
        npad = (n + 15) // 16 * 16
        w = np.zeros((npad, kp), np.int8)
        w[:n, :k] = self.qw.qdata
        self.kp = kp
        self.packed = np.ascontiguousarray(w.reshape(npad // 16, 16, kp // 4, 4).transpose(0, 2, 1, 3))
        cs = np.zeros(npad, np.int32)
        cs[:n] = 128 * self.qw.qdata.astype(np.int32).sum(axis=1)
        self.colsum128 = cs
        ws = np.ones(npad, np.float32)
        ws[:n] = self.qw.scales
        self.wscale = ws
        b = np.zeros(npad, np.float32)
        if self.bias is not None:
            b[:n] = self.bias
        self.bias_pad = b
        self._call = native_caller()

    def __call__(self, x: np.ndarray) -> np.ndarray:
        lead = x.shape[:-1]
        x2 = np.ascontiguousarray(x.reshape(-1, self.k), dtype=np.float32)
        m = x2.shape[0]
        if m == 0:
            return np.zeros((*lead, self.n), np.float32)
        if self.lib is not None:
            out = self._call(x2, self.packed, self.colsum128, self.wscale, self.bias_pad, self.k, self.kp, self.n)
        else:
            xq, xs = quantize_activations(x2)
            acc = int_products(xq, self.qw.qdata)
            out = acc.astype(np.float32) * (xs[:, None] * self.qw.scales[None, :])
            if self.bias is not None:
                out = out + self.bias
        return out.reshape(*lead, self.n)


class FloatLinear:
    """Float forward through the same override hook (same arithmetic as the tape op)."""

    def __init__(self, weight: np.ndarray, bias=None):
        self.w = weight
        self.b = bias

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = x @ self.w.T
        if self.b is not None:
            out = out + self.b
        return out


# --------------------------------------------------------------------------
# native kernel: compiled once per machine and cached


_NATIVE: dict = {}
_FLAGS = ["-O3", "-shared", "-fPIC", "-mavx512f", "-mavx512bw", "-mavx512vl", "-mavx512vnni"]


def cpu_supports_vnni() -> bool:
    try:
        info = Path("/proc/cpuinfo").read_text()
    except OSError:
        return False
    flags = set()
    for line in info.splitlines():
        if line.startswith("flags"):
            flags.update(line.split(":", 1)[1].split())
            break
    return {"avx512f", "avx512bw", "avx512vl", "avx512_vnni"} <= flags


def native_kernel():
    """ctypes handle to the AVX-512 VNNI kernel, or None (numpy fallback)."""
    if "lib" in _NATIVE:
        return _NATIVE["lib"]
    lib = None
    if os.environ.get("DESKASR_NO_NATIVE"):
        log.info("native INT8 kernel disabled by DESKASR_NO_NATIVE")
    elif not cpu_supports_vnni():
        log.info("CPU lacks AVX-512 VNNI; INT8 layers use the numpy path")
    else:
        try:
            lib = _build_and_load()
        except (OSError, subprocess.CalledProcessError, RuntimeError) as exc:
            log.warning("could not build the INT8 kernel (%s); using the numpy path", exc)
    _NATIVE["lib"] = lib
    return lib


def native_caller():
    """Jitted trampoline into the kernel; ctypes argument marshalling costs as much as the kernel."""
    if "call" not in _NATIVE:
        import numba

        f = native_kernel().deskasr_qlinear

        @numba.njit(nogil=True)
        def call(x, wp, cs, ws, b, k, kp, n):
            out = np.empty((x.shape[0], n), np.float32)
            f(x.ctypes.data, wp.ctypes.data, cs.ctypes.data, ws.ctypes.data, b.ctypes.data, out.ctypes.data, x.shape[0], k, kp, n)
            return out

        _NATIVE["call"] = call
    return _NATIVE["call"]


def _build_and_load():
    src = Path(__file__).with_name("qkernel.c")
    cc = os.environ.get("CC") or shutil.which("gcc") or shutil.which("cc")
    if cc is None:
        raise RuntimeError("no C compiler found")
    code = src.read_bytes()
    key = hashlib.sha256(code + " ".join(_FLAGS).encode()).hexdigest()[:16]
    cache = Path(os.environ.get("DESKASR_CACHE", Path.home() / ".cache" / "deskasr"))
    try:
        cache.mkdir(parents=True, exist_ok=True)
    except OSError:
        cache = Path(tempfile.gettempdir()) / "deskasr"
        cache.mkdir(parents=True, exist_ok=True)
    so = cache / f"qkernel_{key}.so"
    if not so.exists():
        fd, tmp = tempfile.mkstemp(suffix=".so", dir=cache)
        os.close(fd)
        subprocess.run([cc, *_FLAGS, str(src), "-o", tmp], check=True, capture_output=True)
        os.replace(tmp, so)
    lib = ctypes.CDLL(str(so))
    f = lib.deskasr_qlinear
    f.argtypes = [ctypes.c_void_p] * 6 + [ctypes.c_int] * 4
    f.restype = None
    g = lib.deskasr_igemm
    g.argtypes = [ctypes.c_void_p] * 3 + [ctypes.c_int] * 3
    g.restype = None
    return lib


# --------------------------------------------------------------------------
# mixed precision


@dataclass
class AmpPlan:
    decisions: dict  # layer name -> INT8 | FLOAT32
    sqnr_db: dict = field(default_factory=dict)
    threshold_db: float = 30.0

    def __post_init__(self):
        bad = {v for v in self.decisions.values()} - {INT8, FLOAT32}
        if bad:
            raise ValueError(f"unknown precision {bad}")

    def n_int8(self) -> int:
        return sum(1 for v in self.decisions.values() if v == INT8)

    def to_json(self) -> dict:
        return {
            "threshold_db": _json_float(self.threshold_db),
            "layers": [{"name": n, "precision": p, "sqnr_db": _json_float(self.sqnr_db.get(n))} for n, p in self.decisions.items()],
        }

    @classmethod
    def from_json(cls, d: dict) -> "AmpPlan":
        dec = {e["name"]: e["precision"] for e in d["layers"]}
        sq = {e["name"]: (math.inf if e.get("sqnr_db") is None else float(e["sqnr_db"])) for e in d["layers"]}
        thr = d.get("threshold_db")
        return cls(dec, sq, float("nan") if thr is None else float(thr))


def _json_float(v):
    if v is None or not math.isfinite(v):
        return None if v is None or math.isnan(v) else (1e9 if v > 0 else -1e9)
    return float(v)


def model_linears(model) -> list[Linear]:
    lins = collect_linears(model)
    names = [lin.name for lin in lins]
    if len(set(names)) != len(names):
        raise ValueError("duplicate linear layer names")
    return lins


def sqnr_db(y_float: np.ndarray, y_quant: np.ndarray) -> float:
    sig = float(np.sum(np.square(y_float, dtype=np.float64)))
    err = float(np.sum(np.square(y_float.astype(np.float64) - y_quant.astype(np.float64))))
    if err == 0.0:
        return math.inf
    if sig == 0.0:
        return -math.inf
    return 10.0 * math.log10(sig / err)


def amp_select(model, calibration_batch, sqnr_threshold_db: float = 30.0, runner=None, backend: str = "auto") -> AmpPlan:
    """Per-layer INT8/FLOAT32 choice from output SQNR on calibration activations."""
    batch = list(calibration_batch)
    if not batch:
        raise ValueError("calibration batch is empty")
    runner = runner or default_runner(model)
    lins = model_linears(model)
    seen: dict[str, list] = {lin.name: [] for lin in lins}
    saved = [lin.override for lin in lins]
    try:
        for lin in lins:
            lin.override = _Recorder(lin, seen[lin.name])
        for item in batch:
            runner(model, item)
    finally:
        for lin, o in zip(lins, saved):
            lin.override = o
    decisions, sq = {}, {}
    for lin in lins:
        xs = seen[lin.name]
        if not xs:
            # never reached on calibration data: no evidence, so only -inf quantizes it
            decisions[lin.name] = INT8 if sqnr_threshold_db == -math.inf else FLOAT32
            sq[lin.name] = float("nan")
            continue
        x = np.concatenate([a.reshape(-1, a.shape[-1]) for a in xs], axis=0)
        b = None if lin.bias is None else lin.bias.data
        yf = FloatLinear(lin.weight.data, b)(x)
        yq = QLinear(quantize_int8(lin.weight.data), b, backend=backend)(x)
        s = sqnr_db(yf, yq)
        sq[lin.name] = s
        # +inf means "keep everything in float", even layers that quantize exactly
        decisions[lin.name] = INT8 if s >= sqnr_threshold_db and sqnr_threshold_db < math.inf else FLOAT32
    return AmpPlan(decisions, sq, sqnr_threshold_db)


class _Recorder:
    def __init__(self, lin: Linear, sink: list):
        self.fl = FloatLinear(lin.weight.data, None if lin.bias is None else lin.bias.data)
        self.sink = sink

    def __call__(self, x):
        self.sink.append(np.array(x, np.float32))
        return self.fl(x)


def default_runner(model):
    from .paraformer import Paraformer, recognize
    from .vad import VadModel, score_frames

    if isinstance(model, Paraformer):
        return lambda m, feats: recognize(m, feats)
    if isinstance(model, VadModel):
        return lambda m, feats: score_frames(feats, m)
    raise TypeError(f"no calibration runner for {type(model).__name__}")


def uniform_plan(model, precision: str) -> AmpPlan:
    return AmpPlan({lin.name: precision for lin in model_linears(model)}, {}, -math.inf if precision == INT8 else math.inf)


def apply_plan(model, plan: AmpPlan, backend: str = "auto") -> None:
    """Install per-layer forwards; every linear layer must appear in the plan exactly once."""
    lins = model_linears(model)
    names = {lin.name for lin in lins}
    if set(plan.decisions) != names:
        missing, extra = names - set(plan.decisions), set(plan.decisions) - names
        raise ValueError(f"plan does not cover the model (missing {sorted(missing)}, extra {sorted(extra)})")
    for lin in lins:
        b = None if lin.bias is None else lin.bias.data
        if plan.decisions[lin.name] == INT8:
            lin.override = QLinear(quantize_int8(lin.weight.data), b, backend=backend)
        else:
            lin.override = FloatLinear(lin.weight.data, b)


def clear_plan(model) -> None:
    for lin in model_linears(model):
        lin.override = None


# --------------------------------------------------------------------------
# benchmarking


@dataclass
class BenchReport:
    audio_seconds: float
    wall_seconds: float
    stages: dict  # stage -> wall seconds
    precision: str = FLOAT32
    n_files: int = 0

    def __post_init__(self):
        if self.audio_seconds <= 0 or self.wall_seconds <= 0:
            raise ValueError("benchmark durations must be positive")

    @property
    def rtf(self) -> float:
        return self.wall_seconds / self.audio_seconds

    def stage_rtf(self) -> dict:
        return {k: v / self.audio_seconds for k, v in self.stages.items()}

    def to_json(self) -> dict:
        return {
            "precision": self.precision,
            "files": self.n_files,
            "audio_seconds": self.audio_seconds,
            "wall_seconds": self.wall_seconds,
            "rtf": self.rtf,
            "stages": {k: {"wall_seconds": v, "rtf": v / self.audio_seconds} for k, v in self.stages.items()},
        }


def bench_rtf(bundle, wav_set, precision: str = "f32", sqnr_db_threshold: float = 30.0, repeats: int = 1, hotwords=None, config=None, plan=None) -> tuple[BenchReport, list]:
    """Single-threaded, batch-1 wall clock of the full pipeline over ``wav_set``.

    ``wav_set`` holds paths or (pcm, sample_rate) pairs.  Returns the report and
    the transcripts of the last repeat.
    """
    from threadpoolctl import threadpool_limits

    from .features import read_wav
    from .pipeline import apply_precision, run_pipeline

    items = []
    for w in wav_set:
        if isinstance(w, (str, os.PathLike)):
            pcm, sr = read_wav(w)
        else:
            pcm, sr = w
        items.append((np.asarray(pcm), int(sr)))
    if not items:
        raise ValueError("bench_rtf needs at least one file")
    audio = sum(len(p) / sr for p, sr in items)
    apply_precision(bundle, precision, sqnr_db_threshold, calibration=[p for p, _ in items[:4]], plan=plan)
    stages: dict = {}
    wall = 0.0
    outs = []
    with threadpool_limits(1):
        # warm-up compiles numba paths and touches every weight
        run_pipeline(items[0][0], bundle, hotwords, config, sample_rate=items[0][1])
        for _ in range(repeats):
            outs = []
            for pcm, sr in items:
                timing: dict = {}
                t0 = time.perf_counter()
                outs.append(run_pipeline(pcm, bundle, hotwords, config, sample_rate=sr, timing=timing))
                wall += time.perf_counter() - t0
                for k, v in timing.items():
                    stages[k] = stages.get(k, 0.0) + v
    return BenchReport(audio * repeats, wall, stages, precision, len(items)), outs
