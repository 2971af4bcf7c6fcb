"""Wall-clock harness for the three decoder operating modes and the cost-model fits.

Modes: ``ForwardBackward`` (teacher-forced pass plus gradients), ``ForwardOnly``
(teacher-forced pass, no graph) and ``Inference`` (encode once, then M
incremental steps fed with forced tokens). Each sample is the mean of
``iters`` timed calls after untimed warm-up; calls are interleaved across the
M (or (M, N)) points so slow drift spreads evenly over the design.
"""
from __future__ import annotations

import csv
import gc
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .corpus import BOS_ID, EncodedExample, SentencePartition
from .model import Full, ModelConfig, Seq2Seq, decode_step
from .training import backward, xent_loss

MODES = ("ForwardBackward", "ForwardOnly", "Inference")
TIMING_HEADER = ["mode", "M", "N", "mean_seconds", "iters"]
QUAD_TERMS = ("c1", "c2", "c3")
BIV_TERMS = ("c1", "c2", "c3", "c4", "c5", "c6")


class BenchError(RuntimeError):
    pass


@dataclass
class TimingSample:
    mode: str
    M: int
    N: int
    mean_seconds: float
    iters: int
    cv: float = 0.0


@dataclass
class TimingFit:
    mode: str
    kind: str                      # "quadratic" or "bivariate"
    coefficients: dict
    r2: float
    max_rel_residual: float
    ratios: dict = field(default_factory=dict)
    samples: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["samples"] = [asdict(s) if isinstance(s, TimingSample) else s for s in self.samples]
        return d


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _r2(y: np.ndarray, pred: np.ndarray) -> float:
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return max(0.0, 1.0 - ss_res / ss_tot)


def _solve(P: np.ndarray, y: np.ndarray, what: str):
    # column scaling keeps M^2 and N^2 from swamping the constant term
    scale = np.abs(P).max(axis=0)
    scale[scale == 0] = 1.0
    Ps = P / scale
    if np.linalg.matrix_rank(Ps) < P.shape[1]:
        raise BenchError(f"{what}: design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(Ps, y, rcond=None)
    return coef / scale


def fit_quadratic(samples, mode: str | None = None) -> TimingFit:
    """Least squares of time on [1, M, M^2]; reports c2/c1 and c3/c1."""
    samples = list(samples)
    M = np.array([s.M if isinstance(s, TimingSample) else s[0] for s in samples], dtype=np.float64)
    y = np.array([s.mean_seconds if isinstance(s, TimingSample) else s[1] for s in samples], dtype=np.float64)
    if len(np.unique(M)) < 4:
        raise BenchError("quadratic fit needs at least 4 distinct M values")
    P = np.stack([np.ones_like(M), M, M * M], axis=1)
    c = _solve(P, y, "quadratic fit")
    pred = P @ c
    coef = dict(zip(QUAD_TERMS, map(float, c)))
    ratios = {"c2/c1": coef["c2"] / coef["c1"], "c3/c1": coef["c3"] / coef["c1"]} if coef["c1"] else {}
    mode = mode or (samples[0].mode if isinstance(samples[0], TimingSample) else "synthetic")
    return TimingFit(mode, "quadratic", coef, _r2(y, pred), float(np.max(np.abs(y - pred) / np.abs(y))),
                     ratios, [s for s in samples if isinstance(s, TimingSample)])


def fit_bivariate(samples, mode: str | None = None) -> TimingFit:
    """Least squares of time on [1, M, N, MN, M^2, N^2]."""
    samples = list(samples)
    if isinstance(samples[0], TimingSample):
        M = np.array([s.M for s in samples], dtype=np.float64)
        N = np.array([s.N for s in samples], dtype=np.float64)
        y = np.array([s.mean_seconds for s in samples])
    else:
        M, N, y = (np.array(col, dtype=np.float64) for col in zip(*samples))
    if len(samples) < 6:
        raise BenchError("bivariate fit needs at least 6 (M, N) points")
    P = np.stack([np.ones_like(M), M, N, M * N, M * M, N * N], axis=1)
    c = _solve(P, y, "bivariate fit")
    pred = P @ c
    coef = dict(zip(BIV_TERMS, map(float, c)))
    ratios = {}
    if coef["c1"]:
        ratios = {f"{k}/c1": v / coef["c1"] for k, v in coef.items() if k != "c1"}
    ratios["c4>c5"] = coef["c4"] > coef["c5"]
    ratios["c4/c5"] = coef["c4"] / coef["c5"] if coef["c5"] else float("inf")
    mode = mode or (samples[0].mode if isinstance(samples[0], TimingSample) else "synthetic")
    return TimingFit(mode, "bivariate", coef, _r2(y, pred), float(np.max(np.abs(y - pred) / np.abs(y))),
                     ratios, [s for s in samples if isinstance(s, TimingSample)])


# ---------------------------------------------------------------------------
# workloads
# ---------------------------------------------------------------------------

def bench_model(N: int = 256, M: int = 64, D: int = 64, H: int = 4, layers: int = 2, vocab: int = 64,
                seed: int = 0) -> Seq2Seq:
    cfg = ModelConfig(vocab, D=D, H=H, ffn=4 * D, enc_layers=layers, dec_layers=layers, max_src=N, max_tgt=M,
                      seed=seed)
    return Seq2Seq(cfg, with_approximator=False)


def synthetic_batch(vocab: int, N: int, M: int, batch: int, sentence_len: int = 8, seed: int = 0):
    """``batch`` documents of N tokens and summaries giving M decoder steps."""
    rng = np.random.default_rng([seed, N, M])
    n1, rem = divmod(N, sentence_len)
    lengths = [sentence_len] * n1 + ([rem] if rem else [])
    part = SentencePartition(tuple(lengths))
    out = []
    for _ in range(batch):
        doc = rng.integers(4, vocab, N)
        summ = rng.integers(4, vocab, max(M - 1, 1))
        out.append(EncodedExample(doc, part, summ, None))
    return out


def _run_fb(model, batch):
    out = model.forward_teacher_forced(batch, Full(), need_grad=True, need_approx=False, need_saliency=False)
    backward(xent_loss(out.logits, out.targets, out.target_mask), model.named_parameters("base"))


def _run_fwd(model, batch):
    with ag.no_grad():
        model.forward_teacher_forced(batch, Full(), need_grad=False, need_approx=False, need_saliency=False)


def _run_inf(model, batch, M):
    for ex in batch:
        state = model.start(ex.doc, ex.part)
        prev = BOS_ID
        tokens = list(ex.summary) + [BOS_ID]
        for m in range(M):
            _, _, state = decode_step(state, [prev])
            prev = tokens[m % len(tokens)]


def workload(model: Seq2Seq, mode: str, batch, M: int):
    if mode == "ForwardBackward":
        return lambda: _run_fb(model, batch)
    if mode == "ForwardOnly":
        return lambda: _run_fwd(model, batch)
    if mode == "Inference":
        return lambda: _run_inf(model, batch, M)
    raise BenchError(f"unknown mode {mode!r}")


def _timed(fns: dict, iters: int, warmup: int, clock=time.perf_counter) -> dict:
    for fn in fns.values():
        for _ in range(warmup):
            fn()
    times = {k: [] for k in fns}
    # collector pauses land on whichever call happens to allocate; keep them out, as timeit does
    gc_was_on = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        with threadpool_limits(limits=1):
            for _ in range(iters):
                for key, fn in fns.items():
                    t0 = clock()
                    fn()
                    times[key].append(clock() - t0)
    finally:
        if gc_was_on:
            gc.enable()
    res = time.get_clock_info("perf_counter").resolution
    shortest = min(float(np.mean(v)) for v in times.values())
    if shortest < 50 * res:
        raise BenchError(f"timer resolution {res:g}s too coarse for {shortest:g}s workloads; use larger dims")
    return times


def time_modes(model: Seq2Seq, N: int, M_values, iters: int = 10, warmup: int = 2, batch: int = 16,
               modes=MODES, seed: int = 0) -> dict[str, list[TimingSample]]:
    """Mean wall-clock per mode and M at fixed N."""
    out = {}
    for mode in modes:
        fns = {}
        for M in M_values:
            b = synthetic_batch(model.cfg.vocab_size, N, M, batch if mode != "Inference" else max(1, batch // 4),
                                seed=seed)
            fns[M] = workload(model, mode, b, M)
        times = _timed(fns, iters, warmup)
        out[mode] = [TimingSample(mode, int(M), int(N), float(np.mean(t)), iters,
                                  float(np.std(t) / np.mean(t))) for M, t in times.items()]
    return out


def time_grid(model: Seq2Seq, M_values, N_values, mode: str = "ForwardBackward", iters: int = 10,
              warmup: int = 2, batch: int = 16, seed: int = 0) -> list[TimingSample]:
    fns = {}
    for N in N_values:
        for M in M_values:
            fns[(M, N)] = workload(model, mode, synthetic_batch(model.cfg.vocab_size, N, M, batch, seed=seed), M)
    times = _timed(fns, iters, warmup)
    return [TimingSample(mode, int(M), int(N), float(np.mean(t)), iters, float(np.std(t) / np.mean(t)))
            for (M, N), t in times.items()]


def synthetic_samples(coef, M_values, N_values=None, noise: float = 0.0, seed: int = 0):
    """Exact (or noise-injected) samples from known coefficients, for self-tests."""
    rng = np.random.default_rng(seed)
    out = []
    if N_values is None:
        for M in M_values:
            t = coef[0] + coef[1] * M + coef[2] * M * M
            out.append(TimingSample("synthetic", int(M), 0, t * (1 + noise * rng.standard_normal()), 1))
        return out
    for N in N_values:
        for M in M_values:
            t = coef[0] + coef[1] * M + coef[2] * N + coef[3] * M * N + coef[4] * M * M + coef[5] * N * N
            out.append(TimingSample("synthetic", int(M), int(N), t * (1 + noise * rng.standard_normal()), 1))
    return out


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

def write_timing_csv(samples, path) -> None:
    with open(path, "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_HEADER)
        for s in samples:
            w.writerow([s.mode, s.M, s.N, f"{s.mean_seconds:.9e}", s.iters])


def ratio_table(fits: dict[str, TimingFit]) -> list[dict]:
    """Per-mode c2/c1 and c3/c1, plus the inference over forward-only c2/c1 gap."""
    rows = [{"mode": m, "c2/c1": f.ratios.get("c2/c1"), "c3/c1": f.ratios.get("c3/c1"), "r2": f.r2}
            for m, f in fits.items()]
    return rows


def write_fit_json(fits: dict[str, TimingFit], path, extra: dict | None = None) -> None:
    doc = {"fits": {k: v.to_dict() for k, v in fits.items()}, "ratio_table": ratio_table(fits)}
    if "Inference" in fits and "ForwardOnly" in fits:
        doc["inference_over_forward_c2c1"] = fits["Inference"].ratios["c2/c1"] / fits["ForwardOnly"].ratios["c2/c1"]
    if extra:
        doc.update(extra)
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
