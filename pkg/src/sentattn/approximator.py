"""Sentence-saliency approximators.

Model-based: a bidirectional GRU runs over each sentence's encoder states,
the concatenated final states are projected to width D, and a per-layer
sentence-level attention ``softmax(scale * (x W_q)(y W_k)^T)`` scores the
sentences for the decoder query input ``x``.

Model-free: ``phi(q) . sum_j phi(k_ij)`` ranks sentences without training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import kernels
from .attention import AttentionConfig, OpCounter, head_average, top_r_select
from .autograd import Tensor
from .corpus import SentencePartition

PHI_NAMES = tuple(kernels.PHI_CODES)


@dataclass(frozen=True)
class ApproxConfig:
    D: int = 64
    H: int = 4
    Ds: int = 64
    gru_layers: int = 2
    dec_layers: int = 2


class ApproximatorParams:
    """Approximator tensors keyed by canonical name.

    Names: ``approx.gru.{layer}.{fwd|bwd}.{w_ih|w_hh|b_ih|b_hh}``,
    ``approx.proj.w``, ``approx.proj.b``, ``approx.wq.{dec_layer}``,
    ``approx.wk.{dec_layer}``. Weights multiply from the right (x @ W).
    """

    def __init__(self, cfg: ApproxConfig, rng: np.random.Generator):
        self.cfg = cfg
        t: dict[str, Tensor] = {}
        bound = 1.0 / np.sqrt(cfg.Ds)
        for layer in range(cfg.gru_layers):
            fan_in = cfg.D if layer == 0 else 2 * cfg.Ds
            for d in ("fwd", "bwd"):
                p = f"approx.gru.{layer}.{d}."
                t[p + "w_ih"] = rng.uniform(-bound, bound, (fan_in, 3 * cfg.Ds))
                t[p + "w_hh"] = rng.uniform(-bound, bound, (cfg.Ds, 3 * cfg.Ds))
                t[p + "b_ih"] = rng.uniform(-bound, bound, 3 * cfg.Ds)
                t[p + "b_hh"] = rng.uniform(-bound, bound, 3 * cfg.Ds)
        t["approx.proj.w"] = rng.normal(0.0, np.sqrt(1.0 / (2 * cfg.Ds)), (2 * cfg.Ds, cfg.D))
        t["approx.proj.b"] = np.zeros(cfg.D)
        for layer in range(cfg.dec_layers):
            t[f"approx.wq.{layer}"] = rng.normal(0.0, cfg.D ** -0.5, (cfg.D, cfg.D))
            t[f"approx.wk.{layer}"] = rng.normal(0.0, cfg.D ** -0.5, (cfg.D, cfg.D))
        self.tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in t.items()}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    @staticmethod
    def expected_count(cfg: ApproxConfig) -> int:
        gru = 0
        for layer in range(cfg.gru_layers):
            fan_in = cfg.D if layer == 0 else 2 * cfg.Ds
            gru += 2 * (3 * cfg.Ds * (fan_in + cfg.Ds) + 6 * cfg.Ds)
        return gru + 2 * cfg.Ds * cfg.D + cfg.D + 2 * cfg.dec_layers * cfg.D * cfg.D


def gru(x: Tensor, mask: np.ndarray, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """Fused masked GRU layer with a hand-written backward pass."""
    hs, cache = kernels.gru_forward(x.data, mask, w_ih.data, w_hh.data, b_ih.data, b_hh.data)

    def backward(g):
        return kernels.gru_backward(np.ascontiguousarray(g), x.data, mask, w_ih.data, w_hh.data, cache)

    return ag.make_op(hs, (x, w_ih, w_hh, b_ih, b_hh), backward)


def sentence_batch(enc: np.ndarray, parts: list[SentencePartition]):
    """Gather encoder states into padded per-sentence sequences.

    Returns X (B*n1max, T, D), mask (B*n1max, T), reversal index (B*n1max, T)
    mapping each valid position t to len-1-t, and sentence validity (B, n1max).
    """
    B = len(parts)
    n1max = max(p.n_sentences for p in parts)
    T = max(max(p.lengths) for p in parts)
    D = enc.shape[-1]
    X = np.zeros((B * n1max, T, D))
    lens = np.zeros(B * n1max, dtype=np.int64)
    valid = np.zeros((B, n1max), dtype=bool)
    for b, part in enumerate(parts):
        off = part.offsets
        for i, j in enumerate(part.lengths):
            X[b * n1max + i, :j] = enc[b, off[i]:off[i + 1]]
            lens[b * n1max + i] = j
        valid[b, :part.n_sentences] = True
    t = np.arange(T)[None, :]
    mask = t < lens[:, None]
    rev = np.where(mask, lens[:, None] - 1 - t, t)
    return X, mask, rev, valid


def encode_sentences_batch(enc: np.ndarray, parts: list[SentencePartition], params: ApproximatorParams,
                           counter: OpCounter | None = None):
    """Sentence representations Y (B, n1max, D) as a Tensor, plus sentence validity.

    Encoder states enter as constants: no gradient reaches the base model.
    """
    cfg = params.cfg
    X, mask, rev, valid = sentence_batch(enc, parts)
    S = X.shape[0]
    rows = np.arange(S)[:, None]
    x = Tensor(X)
    finals = None
    for layer in range(cfg.gru_layers):
        p = f"approx.gru.{layer}."
        hf = gru(x, mask, params[p + "fwd.w_ih"], params[p + "fwd.w_hh"], params[p + "fwd.b_ih"], params[p + "fwd.b_hh"])
        hb_rev = gru(x[rows, rev], mask, params[p + "bwd.w_ih"], params[p + "bwd.w_hh"],
                     params[p + "bwd.b_ih"], params[p + "bwd.b_hh"])
        finals = (hf[:, -1], hb_rev[:, -1])
        if layer + 1 < cfg.gru_layers:
            x = ag.concat([hf, hb_rev[rows, rev]], axis=-1)
    y = ag.concat(list(finals), axis=-1) @ params["approx.proj.w"] + params["approx.proj.b"]
    if counter is not None:
        n_tok = int(mask.sum())
        for layer in range(cfg.gru_layers):
            fan_in = cfg.D if layer == 0 else 2 * cfg.Ds
            counter.add("encoder_side", 2 * n_tok * 3 * cfg.Ds * (fan_in + cfg.Ds))
        counter.add("encoder_side", int(valid.sum()) * 2 * cfg.Ds * cfg.D)
    return y.reshape(len(parts), valid.shape[1], cfg.D), valid


def encode_sentences(token_states: np.ndarray, part: SentencePartition, params: ApproximatorParams,
                     counter: OpCounter | None = None) -> np.ndarray:
    """Y (N1, D) for one document."""
    if token_states.shape[0] != part.n_tokens:
        raise ValueError(f"partition covers {part.n_tokens} tokens, got {token_states.shape[0]} states")
    with ag.no_grad():
        y, _ = encode_sentences_batch(np.asarray(token_states)[None], [part], params, counter)
    return y.data[0]


def to_heads(x, H: int):
    """(..., L, D) -> (..., H, L, D/H) for arrays or Tensors."""
    *lead, L, D = x.shape
    nd = len(lead)
    axes = tuple(range(nd)) + (nd + 1, nd, nd + 2)
    if isinstance(x, Tensor):
        return x.reshape(tuple(lead) + (L, H, D // H)).transpose(*axes)
    return x.reshape(tuple(lead) + (L, H, D // H)).transpose(axes)


def sentence_keys(Y, params: ApproximatorParams, layer: int, counter: OpCounter | None = None):
    """Per-layer mapped sentence keys ``Y W_k`` split into heads: (..., H, N1, dh)."""
    k = ag.as_tensor(Y) @ params[f"approx.wk.{layer}"]
    if counter is not None:
        counter.add("encoder_side", int(np.prod(Y.shape[:-1])) * params.cfg.D * params.cfg.D)
    return to_heads(k, params.cfg.H)


def approx_saliency(q_in, Y, params: ApproximatorParams, layer: int, cfg: AttentionConfig,
                    sentence_valid: np.ndarray | None = None, keys=None,
                    counter: OpCounter | None = None):
    """Approximate saliency per head.

    ``q_in`` is the decoder's cross-attention query input (pre-projection),
    shape (..., M, D); ``Y`` is (..., N1, D). Returns a Tensor (..., H, M, N1).
    Pass precomputed ``keys`` (from :func:`sentence_keys`) to reuse the
    document-level key mapping across steps.
    """
    q_in = ag.as_tensor(q_in).detach() if isinstance(q_in, Tensor) else Tensor(q_in)
    qh = to_heads(q_in @ params[f"approx.wq.{layer}"], cfg.H)
    kh = sentence_keys(Y, params, layer) if keys is None else keys
    logits = (qh @ kh.transpose(*_swap_last(kh.ndim))) * cfg.scale
    mask = None
    if sentence_valid is not None:
        mask = ~np.asarray(sentence_valid)[..., None, None, :]
    if counter is not None:
        M = int(np.prod(q_in.shape[:-1]))
        n1 = kh.shape[-2]
        counter.add("sentence_proj", M * cfg.D * cfg.D)
        counter.add("sentence_score", M * n1 * cfg.D)
        counter.add("sentence_softmax", M * n1 * cfg.H)
    return ag.softmax(logits, axis=-1, mask=mask)


def _swap_last(nd: int) -> tuple:
    return tuple(range(nd - 2)) + (nd - 1, nd - 2)


# ---------------------------------------------------------------------------
# model-free approximation
# ---------------------------------------------------------------------------

def phi(x, name: str) -> np.ndarray:
    """Positive feature map: elu_plus_one (x+1 if x>0 else e^x), relu, or exp."""
    if name not in kernels.PHI_CODES:
        raise ValueError(f"unknown feature map {name!r}; choose from {PHI_NAMES}")
    return kernels.np_phi(np.asarray(x, dtype=np.float64), kernels.PHI_CODES[name])


def model_free_features(k_heads: np.ndarray, part: SentencePartition, phi_name: str,
                        counter: OpCounter | None = None) -> np.ndarray:
    """F (H, N1, dh) with F_i = sum over the sentence's tokens of phi(k)."""
    k_heads = np.asarray(k_heads, dtype=np.float64)
    if k_heads.ndim == 2:
        k_heads = k_heads[None]
    if k_heads.shape[1] != part.n_tokens:
        raise ValueError("partition inconsistent with keys")
    if counter is not None:
        counter.add("encoder_side", k_heads.shape[0] * k_heads.shape[1] * k_heads.shape[2])
    return kernels.feature_sums(k_heads, part.offsets, kernels.PHI_CODES[phi_name])


def model_free_scores(q_heads: np.ndarray, F: np.ndarray, phi_name: str,
                      counter: OpCounter | None = None) -> np.ndarray:
    """Unnormalised scores phi(q).F_i; q_heads (H, dh) or (M, H, dh) -> (H, N1) / (M, H, N1).

    ``q_heads`` should already carry the attention scale.
    """
    fq = phi(q_heads, phi_name)
    s = np.einsum("...hd,hnd->...hn", fq, F)
    if counter is not None:
        M = 1 if fq.ndim == 2 else fq.shape[0]
        H, n1, dh = F.shape
        counter.add("sentence_score", M * n1 * H * dh)
        counter.add("sentence_softmax", M * n1 * H)
    return s


def model_free_rank(scores: np.ndarray) -> np.ndarray:
    """Head-averaged ranking weights: each head's scores are normalised to sum to 1.

    A head whose scores are all zero (possible with relu) contributes uniform weight.
    """
    tot = scores.sum(axis=-1, keepdims=True)
    n1 = scores.shape[-1]
    norm = np.where(tot > 0, scores / np.where(tot > 0, tot, 1.0), 1.0 / n1)
    return head_average(norm)


def model_free_select(q_heads, F, phi_name: str, r: int) -> np.ndarray:
    return top_r_select(model_free_rank(model_free_scores(q_heads, F, phi_name)), r)


def product_form_mass(q: np.ndarray, k_sent: np.ndarray) -> float:
    """sum_j prod_d exp(q_d k_jd): the exact unnormalised sentence mass."""
    return float(np.prod(np.exp(q[None, :] * k_sent), axis=1).sum())


def additive_form_mass(q: np.ndarray, k_sent: np.ndarray) -> float:
    """sum_j sum_d exp(q_d k_jd): the first (additive) relaxation."""
    return float(np.exp(q[None, :] * k_sent).sum())
