"""Encoder-decoder attention: full, sentence-subset, saliency and selection.

All functions work on plain float64 arrays for a single document. Projected
queries/keys/values are (L, D) with heads laid out as contiguous blocks of
``head_dim`` columns. Sentence indices are 0-based.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .corpus import SentencePartition


class AttentionError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    D: int
    H: int

    def __post_init__(self):
        if not (self.D >= self.H >= 1) or self.D % self.H:
            raise AttentionError(f"head count {self.H} must divide width {self.D}")

    @property
    def head_dim(self) -> int:
        return self.D // self.H

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.head_dim)


PROVENANCE = ("Ideal", "Approx", "Random", "All", "ModelFree")


@dataclass
class SelectionPlan:
    """Per-step selected sentences (sorted, 0-based) shared across heads."""

    r: int
    steps: list[np.ndarray] = field(default_factory=list)
    provenance: str = "Ideal"

    def __post_init__(self):
        if self.provenance not in PROVENANCE:
            raise AttentionError(f"unknown provenance {self.provenance!r}")

    @classmethod
    def all_sentences(cls, n1: int, M: int) -> "SelectionPlan":
        return cls(n1, [np.arange(n1) for _ in range(M)], "All")

    def validate(self, n1: int) -> None:
        want = min(self.r, n1)
        for m, idx in enumerate(self.steps):
            if len(idx) == 0:
                raise AttentionError(f"empty selection at step {m}")
            if len(idx) != want or np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= n1:
                raise AttentionError(f"invalid selection {list(idx)} at step {m} for N1={n1}, r={self.r}")


class OpCounter:
    """Tally of multiply-accumulates and softmax input elements by category.

    Categories used by the model: ``word_score``/``word_value``/``word_softmax``
    (word-level attention actually computed), ``saliency_score``/``saliency_softmax``
    (full-key saliency of the ideal path), ``sentence_score``/``sentence_softmax``
    and ``sentence_proj`` (per-step approximator work), ``encoder_side`` (one-off
    per-document sentence representation work).
    """

    SOFTMAX = ("word_softmax", "saliency_softmax", "sentence_softmax")

    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)

    def add(self, category: str, n: int) -> None:
        if n < 0:
            raise ValueError("counts only grow")
        self.counts[category] += int(n)

    def __getitem__(self, category: str) -> int:
        return self.counts.get(category, 0)

    @property
    def mac_count(self) -> int:
        return sum(v for k, v in self.counts.items() if k not in self.SOFTMAX)

    @property
    def softmax_elem_count(self) -> int:
        return sum(v for k, v in self.counts.items() if k in self.SOFTMAX)

    def reset(self) -> None:
        self.counts.clear()

    def merge(self, other: "OpCounter") -> "OpCounter":
        out = OpCounter()
        for src in (self, other):
            for k, v in src.counts.items():
                out.counts[k] += v
        return out

    def as_dict(self) -> dict[str, int]:
        return dict(sorted(self.counts.items()))


def split_heads(x: np.ndarray, H: int) -> np.ndarray:
    """(L, D) -> (H, L, D/H)."""
    L, D = x.shape
    return x.reshape(L, H, D // H).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(H, L, dh) -> (L, H*dh)."""
    H, L, dh = x.shape
    return x.transpose(1, 0, 2).reshape(L, H * dh)


def _check(Q, K, V, cfg):
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise AttentionError("Q, K, V must be 2-D")
    if Q.shape[1] != cfg.D or K.shape[1] != cfg.D or V.shape[1] != cfg.D:
        raise AttentionError(f"width mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}, D={cfg.D}")
    if K.shape[0] != V.shape[0]:
        raise AttentionError("K and V must have the same number of rows")


def attention_weights(Q, K, cfg) -> np.ndarray:
    """Per-head word-level softmax weights, shape (H, M, N)."""
    q = split_heads(Q, cfg.H) * cfg.scale
    k = split_heads(K, cfg.H)
    logits = q @ k.transpose(0, 2, 1)
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def full_cross_attention(Q, K, V, cfg: AttentionConfig, counter: OpCounter | None = None,
                         return_weights: bool = False):
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    _check(Q, K, V, cfg)
    w = attention_weights(Q, K, cfg)
    out = merge_heads(w @ split_heads(V, cfg.H))
    if counter is not None:
        M, N = Q.shape[0], K.shape[0]
        counter.add("word_score", M * N * cfg.D)
        counter.add("word_value", M * N * cfg.D)
        counter.add("word_softmax", M * N * cfg.H)
    return (out, w) if return_weights else out


def sentence_saliency(q, K, part: SentencePartition, cfg: AttentionConfig,
                      counter: OpCounter | None = None) -> np.ndarray:
    """Softmax attention mass per sentence, per head.

    ``q`` is (D,) or (M, D); returns (H, N1) or (M, H, N1).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    Q = q[None] if single else q
    if K.shape[0] != part.n_tokens:
        raise AttentionError(f"partition covers {part.n_tokens} tokens, K has {K.shape[0]} rows")
    qh = split_heads(Q, cfg.H) * cfg.scale                   # (H, M, dh)
    logits = qh @ split_heads(K, cfg.H).transpose(0, 2, 1)   # (H, M, N)
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    mass = kernels.segment_sum(e, part.offsets)              # (H, M, N1)
    alpha = (mass / mass.sum(axis=-1, keepdims=True)).transpose(1, 0, 2)
    if counter is not None:
        counter.add("saliency_score", Q.shape[0] * K.shape[0] * cfg.D)
        counter.add("saliency_softmax", Q.shape[0] * K.shape[0] * cfg.H)
    return alpha[0] if single else alpha


def head_average(alpha: np.ndarray) -> np.ndarray:
    """Average over the head axis (second to last)."""
    return alpha.mean(axis=-2)


def top_r_select(row, r: int) -> np.ndarray:
    """Indices of the ``min(r, N1)`` largest entries, ties to the lowest index, ascending."""
    if r < 1:
        raise AttentionError("r must be >= 1")
    row = np.asarray(row, dtype=np.float64)
    order = np.argsort(-row, kind="stable")
    return np.sort(order[: min(r, row.shape[0])])


def top_r_mask(scores: np.ndarray, r: int, valid: np.ndarray | None = None) -> np.ndarray:
    """Boolean top-r mask over the last axis; entries outside ``valid`` never win."""
    if r < 1:
        raise AttentionError("r must be >= 1")
    s = np.asarray(scores, dtype=np.float64)
    if valid is not None:
        s = np.where(valid, s, -np.inf)
    order = np.argsort(-s, axis=-1, kind="stable")[..., :r]
    mask = np.zeros(s.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    if valid is not None:
        mask &= np.broadcast_to(valid, s.shape)
    return mask


def random_select(n1: int, r: int, rng: np.random.Generator) -> np.ndarray:
    if r < 1:
        raise AttentionError("r must be >= 1")
    return np.sort(rng.choice(n1, size=min(r, n1), replace=False))


def _csr(steps, part: SentencePartition):
    rows = [part.token_indices(idx) for idx in steps]
    row_ptr = np.concatenate([[0], np.cumsum([len(r) for r in rows])]).astype(np.int64)
    tok = np.concatenate(rows).astype(np.int64) if rows else np.empty(0, dtype=np.int64)
    return row_ptr, tok


def subset_cross_attention(Q, K, V, plan, part: SentencePartition, cfg: AttentionConfig,
                           counter: OpCounter | None = None) -> np.ndarray:
    """Attention of step m restricted to the tokens of its selected sentences.

    ``plan`` is a :class:`SelectionPlan` or a list of per-step index arrays.
    """
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    _check(Q, K, V, cfg)
    steps = plan.steps if isinstance(plan, SelectionPlan) else list(plan)
    if len(steps) != Q.shape[0]:
        raise AttentionError(f"plan has {len(steps)} steps for {Q.shape[0]} queries")
    if K.shape[0] != part.n_tokens:
        raise AttentionError("partition inconsistent with K")
    for m, idx in enumerate(steps):
        if len(idx) == 0:
            raise AttentionError(f"empty selection at step {m}")
    row_ptr, tok = _csr(steps, part)
    q = split_heads(Q, cfg.H).transpose(1, 0, 2) * cfg.scale   # (M, H, dh)
    out = kernels.subset_attend(np.ascontiguousarray(q), np.ascontiguousarray(split_heads(K, cfg.H)),
                                np.ascontiguousarray(split_heads(V, cfg.H)), row_ptr, tok)
    if counter is not None:
        count_word_level(counter, int(row_ptr[-1]), cfg)
    return out.reshape(Q.shape[0], cfg.D)


def count_word_level(counter: OpCounter, n_tokens_attended: int, cfg: AttentionConfig) -> None:
    counter.add("word_score", n_tokens_attended * cfg.D)
    counter.add("word_value", n_tokens_attended * cfg.D)
    counter.add("word_softmax", n_tokens_attended * cfg.H)


def retained_weight(row, selected) -> float:
    return float(np.asarray(row)[np.asarray(selected, dtype=np.int64)].sum())


# ---------------------------------------------------------------------------
# analysis outputs
# ---------------------------------------------------------------------------

def retained_curve(model, examples, r_values, layers=None, batch_size: int = 32) -> dict:
    """Mean retained head-averaged weight under ideal top-r selection.

    Averaged over every decoding step of every example (steps pooled across
    examples). Returns ``{layer: {r: mean}}`` with 0-based layer keys.
    """
    layers = list(range(model.cfg.dec_layers)) if layers is None else list(layers)
    sums = {l: {r: 0.0 for r in r_values} for l in layers}
    steps = 0
    for start in range(0, len(examples), batch_size):
        batch = examples[start:start + batch_size]
        out = model.forward_teacher_forced(batch, need_grad=False)
        valid = out.target_mask                               # (B, M)
        for l in layers:
            abar = head_average(out.alpha[l].data.transpose(0, 2, 1, 3))   # (B, M, N1)
            order = np.argsort(-abar, axis=-1, kind="stable")
            ranked = np.take_along_axis(abar, order, axis=-1).cumsum(axis=-1)
            for r in r_values:
                kept = ranked[..., min(r, ranked.shape[-1]) - 1]
                sums[l][r] += float(kept[valid].sum())
        steps += int(valid.sum())
    return {l: {r: sums[l][r] / steps for r in r_values} for l in layers}


def write_retained_curve(curve: dict, path, meta: dict | None = None) -> None:
    with open(path, "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "r", "mean_retained"])
        for layer, row in curve.items():
            for r, v in row.items():
                w.writerow([layer + 1, r, f"{v:.10g}"])
    if meta is not None:
        with open(str(path) + ".meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


@dataclass
class CostReport:
    predicted_macs: int
    measured_macs: int
    predicted_softmax: int
    measured_softmax: int
    k_w: float
    k_e_measured: float
    breakdown: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "predicted_macs": self.predicted_macs, "measured_macs": self.measured_macs,
            "predicted_softmax": self.predicted_softmax, "measured_softmax": self.measured_softmax,
            "k_w": self.k_w, "k_e_measured": self.k_e_measured, "breakdown": self.breakdown,
        }, indent=2, sort_keys=True)


def count_macs_report(counter: OpCounter, M: int, N1: int, N2: int, D: int, H: int = 1,
                      r: int | None = None, layers: int = 1) -> CostReport:
    """Compare a populated counter with the closed-form attention costs.

    With ``r=None`` the prediction is vanilla attention over N = N1*N2 words
    (2*M*N*D MACs, M*N*H softmax elements). Otherwise it is the two-level
    decomposition: sentence level M*N1*D MACs and M*N1*H softmax elements,
    word level 2*M*r*N2*D MACs and M*r*N2*H softmax elements (r capped at N1).
    ``k_w`` is the measured per-word over per-sentence cost with unit p and q;
    ``k_e_measured`` is one-off encoder-side MACs per input word.
    """
    N = N1 * N2
    if r is None:
        pred_macs = 2 * M * N * D
        pred_soft = M * N * H
        meas_macs = counter["word_score"] + counter["word_value"]
        meas_soft = counter["word_softmax"]
        k_w = float("nan")
    else:
        rr = min(r, N1)
        pred_macs = M * N1 * D + 2 * M * rr * N2 * D
        pred_soft = M * N1 * H + M * rr * N2 * H
        meas_macs = counter["sentence_score"] + counter["word_score"] + counter["word_value"]
        meas_soft = counter["sentence_softmax"] + counter["word_softmax"]
        word = (counter["word_score"] + counter["word_value"] + counter["word_softmax"]) / (layers * M * rr * N2)
        sent_units = counter["sentence_score"] + counter["sentence_softmax"]
        k_w = word / (sent_units / (layers * M * N1)) if sent_units else float("nan")
    return CostReport(pred_macs * layers, meas_macs, pred_soft * layers, meas_soft, k_w,
                      counter["encoder_side"] / N, counter.as_dict())
