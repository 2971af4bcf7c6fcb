"""ROUGE, selection quality, the mode-by-r evaluation sweep and attention map export."""
from __future__ import annotations

import csv
import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import head_average, top_r_mask
from .model import Full, Seq2Seq, beam_decode, greedy_decode, mode_label, strip_special

METRICS_HEADER = ["mode", "r", "R1", "R2", "RL", "selection_recall", "delta_R1"]


@dataclass(frozen=True)
class RougeScore:
    r1: float
    r2: float
    rl: float

    def as_tuple(self) -> tuple[float, float, float]:
        return self.r1, self.r2, self.rl


def _f1(overlap: int, n_hyp: int, n_ref: int) -> float:
    if overlap == 0 or n_hyp == 0 or n_ref == 0:
        return 0.0
    p, r = overlap / n_hyp, overlap / n_ref
    return 2 * p * r / (p + r)


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge(hypothesis, reference) -> RougeScore:
    """ROUGE-1/2/L F1 in percent; no stemming, LCS over the whole sequences.

    An empty hypothesis scores zero; an empty reference is an error.
    """
    hyp, ref = list(hypothesis), list(reference)
    if not ref:
        raise ValueError("empty reference")
    out = []
    for n in (1, 2):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        out.append(100.0 * _f1(sum((h & r).values()), sum(h.values()), sum(r.values())))
    out.append(100.0 * _f1(lcs_length(hyp, ref), len(hyp), len(ref)))
    return RougeScore(*out)


def selection_recall(plans, truth) -> float:
    """Mean over steps of |selected & truth| / min(r, |truth|).

    ``plans`` is a sequence of per-step index collections (0-based, like
    ``truth``); a step may also be a list of per-layer collections, which are
    averaged.
    """
    if truth is None or len(truth) == 0:
        raise ValueError("ground-truth salient sentences absent")
    truth = set(int(t) for t in truth)
    vals = []
    for step in plans:
        layers = step if len(step) and np.ndim(step[0]) == 1 else [step]
        for sel in layers:
            sel = set(int(i) for i in sel)
            vals.append(len(sel & truth) / min(len(sel), len(truth)))
    if not vals:
        raise ValueError("no selection steps")
    return float(np.mean(vals))


@dataclass
class MatrixRow:
    mode: str
    r: int
    R1: float
    R2: float
    RL: float
    selection_recall: float | None
    delta_R1: float = 0.0

    def csv_row(self) -> list[str]:
        rec = "" if self.selection_recall is None else f"{self.selection_recall:.6f}"
        return [self.mode, str(self.r), f"{self.R1:.6f}", f"{self.R2:.6f}", f"{self.RL:.6f}", rec,
                f"{self.delta_R1:.6f}"]


def decode_example(model: Seq2Seq, ex, mode, search: str = "beam", width=None, alpha=None, max_len=None):
    if search == "greedy":
        return greedy_decode(model, ex.doc, ex.part, mode, max_len)
    return beam_decode(model, ex.doc, ex.part, mode, width, alpha, max_len)


def _score_mode(model, examples, mode, search, width, alpha, max_len, threads):
    def one(ex):
        hyp = decode_example(model, ex, mode, search, width, alpha, max_len)
        score = rouge(strip_special(hyp.tokens), list(ex.summary))
        rec = None
        if mode.r is not None and ex.salient is not None:
            rec = selection_recall(hyp.plans, ex.salient)
        return score, rec

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, examples))
    else:
        results = [one(ex) for ex in examples]
    scores = np.array([s.as_tuple() for s, _ in results])
    recalls = [r for _, r in results if r is not None]
    return scores.mean(axis=0), (float(np.mean(recalls)) if recalls else None)


def evaluate_matrix(model: Seq2Seq, examples, modes, r_values, search: str = "beam", width=None, alpha=None,
                    max_len=None, threads: int = 1) -> list[MatrixRow]:
    """Mean ROUGE (and selection recall) per (mode, r).

    ``modes`` holds factories ``r -> mode`` or mode objects; ``Full`` is
    decoded once and repeated for every r. ``delta_R1`` is relative to Full.
    """
    full_scores, _ = _score_mode(model, examples, Full(), search, width, alpha, max_len, threads)
    rows = []
    for factory in modes:
        for r in r_values:
            mode = factory(r) if callable(factory) else factory
            if isinstance(mode, Full):
                s, rec = full_scores, None
            else:
                s, rec = _score_mode(model, examples, mode, search, width, alpha, max_len, threads)
            rows.append(MatrixRow(mode_label(mode), int(r), *map(float, s), rec, float(s[0] - full_scores[0])))
    return rows


def write_metrics(rows: list[MatrixRow], path, meta: dict | None = None) -> None:
    with open(path, "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in rows:
            w.writerow(row.csv_row())
    if meta is not None:
        with open(str(path) + ".meta.json", "w", newline="\n") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# teacher-forced selection diagnostics
# ---------------------------------------------------------------------------

def approx_overlap(model: Seq2Seq, examples, r: int, batch_size: int = 32) -> float:
    """Mean |top-r(approx) & top-r(ideal)| / min(r, N1) over steps, layers and examples."""
    num = den = 0.0
    for start in range(0, len(examples), batch_size):
        out = model.forward_teacher_forced(examples[start:start + batch_size], Full(), need_grad=False,
                                           need_approx=True)
        valid = out.sentence_valid[:, None, :]
        cap = np.minimum(r, out.sentence_valid.sum(axis=1))[:, None]
        for a, t in zip(out.alpha, out.alpha_tilde):
            ideal = top_r_mask(a.data.mean(axis=1), r, valid)
            apx = top_r_mask(t.data.mean(axis=1), r, valid)
            frac = (ideal & apx).sum(axis=-1) / cap
            num += float(frac[out.target_mask].sum())
            den += float(out.target_mask.sum())
    return num / den


def mean_saliency_entropy(model: Seq2Seq, examples, batch_size: int = 32) -> float:
    """Head-averaged per-step saliency entropy, pooled over steps, layers and examples."""
    tot = n = 0.0
    for start in range(0, len(examples), batch_size):
        out = model.forward_teacher_forced(examples[start:start + batch_size], Full(), need_grad=False,
                                           need_approx=False)
        for a in out.alpha:
            p = a.data
            ent = -(p * np.log(np.maximum(p, 1e-12))).sum(axis=-1).mean(axis=1)
            tot += float(ent[out.target_mask].sum())
            n += float(out.target_mask.sum())
    return tot / n


# ---------------------------------------------------------------------------
# attention maps
# ---------------------------------------------------------------------------

def attention_maps(model: Seq2Seq, example, layer: int):
    """Head-averaged teacher-forced weights: word level (M, N) and sentence level (M, N1).

    Rows cover the summary tokens and the final EOS step.
    """
    if not 0 <= layer < model.cfg.dec_layers:
        raise ValueError(f"layer {layer} outside 0..{model.cfg.dec_layers - 1}")
    out = model.forward_teacher_forced([example], Full(), need_grad=False, need_approx=False)
    steps = int(out.target_mask[0].sum())
    word = out.weights[layer].data[0].mean(axis=0)[:steps, :example.part.n_tokens]
    sent = head_average(out.alpha[layer].data[0].transpose(1, 0, 2))[:steps, :example.part.n_sentences]
    return word, sent


def write_matrix_csv(mat: np.ndarray, path) -> None:
    with open(path, "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in mat:
            w.writerow([repr(float(x)) for x in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(x) for x in row] for row in csv.reader(fh)])


def heatmap_svg(mat: np.ndarray, cell: int = 10, title: str = "") -> str:
    """Grey-scale heatmap, darker = more weight; rows are decoding steps."""
    rows, cols = mat.shape
    top = 20 if title else 0
    hi = float(mat.max()) or 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * cell}" height="{rows * cell + top}">']
    if title:
        parts.append(f'<text x="2" y="14" font-size="12" font-family="monospace">{title}</text>')
    for i in range(rows):
        for j in range(cols):
            g = int(round(255 * (1.0 - mat[i, j] / hi)))
            parts.append(f'<rect x="{j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb({g},{g},{g})"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_attention_maps(model: Seq2Seq, example, layer: int, out_dir, stem: str = "attention",
                          svg: bool = True) -> dict[str, Path]:
    word, sent = attention_maps(model, example, layer)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"word": out_dir / f"{stem}_word_l{layer + 1}.csv", "sentence": out_dir / f"{stem}_sentence_l{layer + 1}.csv"}
    write_matrix_csv(word, paths["word"])
    write_matrix_csv(sent, paths["sentence"])
    if svg:
        for key, mat in (("word", word), ("sentence", sent)):
            p = out_dir / f"{stem}_{key}_l{layer + 1}.svg"
            p.write_text(heatmap_svg(mat, title=f"{key} level, layer {layer + 1}"))
            paths[key + "_svg"] = p
    return paths

