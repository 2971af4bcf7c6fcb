"""Desk-scale pre-LN encoder-decoder transformer with selectable cross-attention.

Two execution paths share one parameter set:

* :meth:`Seq2Seq.forward_teacher_forced` runs a padded batch through the
  autograd engine; subset attention is a masked softmax, which equals the
  softmax restricted to the selected tokens.
* :func:`decode_step` runs one incremental step in plain numpy for one or more
  hypotheses of a single document, touching only selected tokens in the
  word-level cross-attention.
"""
from __future__ import annotations

import contextlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from . import kernels
from .approximator import (ApproxConfig, ApproximatorParams, approx_saliency, encode_sentences_batch,
                           model_free_features, model_free_rank, model_free_scores, phi, sentence_keys,
                           to_heads)
from .attention import AttentionConfig, OpCounter, count_word_level, random_select, top_r_mask, top_r_select
from .autograd import Tensor
from .corpus import BOS_ID, EOS_ID, PAD_ID, EncodedExample, SentencePartition


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    D: int = 64
    H: int = 4
    ffn: int = 256
    enc_layers: int = 2
    dec_layers: int = 2
    max_src: int = 256
    max_tgt: int = 64
    Ds: int = 64
    gru_layers: int = 2
    beam_width: int = 4
    length_penalty: float = 2.0
    seed: int = 0

    @property
    def attn(self) -> AttentionConfig:
        return AttentionConfig(self.D, self.H)

    @property
    def approx(self) -> ApproxConfig:
        return ApproxConfig(self.D, self.H, self.Ds, self.gru_layers, self.dec_layers)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# attention modes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Full:
    tag = "Full"
    r = None


@dataclass(frozen=True)
class _Subset:
    r: int

    def __post_init__(self):
        if self.r < 1:
            raise ModelError("r must be >= 1")


@dataclass(frozen=True)
class IdealSubset(_Subset):
    tag = "Ideal"


@dataclass(frozen=True)
class ApproxSubset(_Subset):
    tag = "Approx"


@dataclass(frozen=True)
class ModelFreeSubset(_Subset):
    phi: str = "elu_plus_one"
    tag = "ModelFree"


@dataclass(frozen=True)
class RandomSubset(_Subset):
    seed: int = 0
    tag = "Random"


@dataclass(frozen=True)
class MixSubset(_Subset):
    """Ideal selection with probability ``p_ideal``, approximate otherwise (one draw per pass)."""

    p_ideal: float = 1.0
    seed: int = 0
    tag = "Mix"


def needs_approximator(mode) -> bool:
    return isinstance(mode, (ApproxSubset, MixSubset))


def parse_mode(text: str, r: int | None = None, seed: int = 0):
    """'full', 'ideal', 'approx', 'random', 'modelfree[:phi]' -> mode object."""
    name, _, arg = text.strip().lower().partition(":")
    if name == "full":
        return Full()
    if r is None:
        raise ModelError(f"mode {text!r} needs r")
    if name == "ideal":
        return IdealSubset(r)
    if name in ("approx", "apx"):
        return ApproxSubset(r)
    if name in ("random", "rnd"):
        return RandomSubset(r, seed)
    if name in ("modelfree", "model-free", "free"):
        return ModelFreeSubset(r, arg or "elu_plus_one")
    raise ModelError(f"unknown mode {text!r}")


def mode_label(mode) -> str:
    if isinstance(mode, ModelFreeSubset):
        return f"ModelFree-{mode.phi}"
    return mode.tag


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def sinusoidal_positions(n: int, D: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, D, 2)[None, :]
    angle = pos / np.power(10000.0, i / D)
    pe = np.zeros((n, D))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : D // 2])
    return pe


def _np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (1.0 / np.sqrt(var + eps)) * g + b


def _np_softmax(x, axis=-1):
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def _np_log_softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def merge_heads_t(x: Tensor) -> Tensor:
    *lead, H, L, dh = x.shape
    nd = len(lead)
    axes = tuple(range(nd)) + (nd + 1, nd, nd + 2)
    return x.transpose(*axes).reshape(tuple(lead) + (L, H * dh))


@dataclass
class ForwardOutput:
    logits: Tensor                 # (B, M, V)
    targets: np.ndarray            # (B, M)
    target_mask: np.ndarray        # (B, M)
    alpha: list                    # per layer Tensor (B, H, M, N1)
    alpha_tilde: list | None       # per layer Tensor (B, H, M, N1)
    selections: list               # per layer bool (B, M, N1) or None for full attention
    weights: list                  # per layer Tensor (B, H, M, N) full word-level weights
    sentence_valid: np.ndarray     # (B, N1)
    parts: list
    drew_ideal: bool | None = None


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Seq2Seq:
    def __init__(self, cfg: ModelConfig, with_approximator: bool = True):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        D, F = cfg.D, cfg.ffn
        p: dict[str, np.ndarray] = {"emb": rng.normal(0.0, D ** -0.5, (cfg.vocab_size, D))}

        def lin(name, fan_in, fan_out):
            p[name] = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), (fan_in, fan_out))

        def ln(name):
            p[name + ".g"] = np.ones(D)
            p[name + ".b"] = np.zeros(D)

        def attn(prefix):
            for w in ("wq", "wk", "wv", "wo"):
                lin(f"{prefix}.{w}", D, D)

        def ffn(prefix):
            lin(prefix + ".w1", D, F)
            p[prefix + ".b1"] = np.zeros(F)
            lin(prefix + ".w2", F, D)
            p[prefix + ".b2"] = np.zeros(D)

        for i in range(cfg.enc_layers):
            ln(f"enc.{i}.ln1"); attn(f"enc.{i}.self"); ln(f"enc.{i}.ln2"); ffn(f"enc.{i}.ffn")
        ln("enc.ln")
        for i in range(cfg.dec_layers):
            ln(f"dec.{i}.ln1"); attn(f"dec.{i}.self"); ln(f"dec.{i}.ln2"); attn(f"dec.{i}.cross")
            ln(f"dec.{i}.ln3"); ffn(f"dec.{i}.ffn")
        ln("dec.ln")
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}
        self.pe = sinusoidal_positions(max(cfg.max_src, cfg.max_tgt) + 2, D)
        self.approx: ApproximatorParams | None = None
        self.approx_trained = False
        if with_approximator:
            self.attach_approximator()

    # -- parameter groups ---------------------------------------------------
    def attach_approximator(self, seed: int | None = None) -> ApproximatorParams:
        """Fresh approximator whose sentence-level W_q/W_k start as copies of the cross-attention ones."""
        rng = np.random.default_rng(self.cfg.seed + 7919 if seed is None else seed)
        self.approx = ApproximatorParams(self.cfg.approx, rng)
        for l in range(self.cfg.dec_layers):
            self.approx[f"approx.wq.{l}"].data = self.params[f"dec.{l}.cross.wq"].data.copy()
            self.approx[f"approx.wk.{l}"].data = self.params[f"dec.{l}.cross.wk"].data.copy()
        return self.approx

    def named_parameters(self, group: str = "all") -> dict[str, Tensor]:
        """Groups: 'all', 'base' (encoder+decoder+embeddings), 'encoder', 'decoder', 'approx'."""
        base = self.params
        if group == "base":
            return dict(base)
        if group == "encoder":
            return {k: v for k, v in base.items() if k.startswith("enc.") or k == "emb"}
        if group == "decoder":
            return {k: v for k, v in base.items() if k.startswith("dec.")}
        if group == "approx":
            return dict(self.approx.tensors) if self.approx is not None else {}
        if group == "all":
            out = dict(base)
            if self.approx is not None:
                out.update(self.approx.tensors)
            return out
        raise ModelError(f"unknown parameter group {group!r}")

    def parameter_count(self, group: str = "all") -> int:
        return sum(t.data.size for t in self.named_parameters(group).values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters("all").items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if any(k.startswith("approx.") for k in state) and self.approx is None:
            self.attach_approximator()
        params = self.named_parameters("all")
        for k, v in state.items():
            if k not in params:
                raise ModelError(f"unexpected parameter {k!r}")
            if params[k].data.shape != v.shape:
                raise ModelError(f"shape mismatch for {k}: {params[k].data.shape} vs {v.shape}")
            params[k].data = np.array(v, dtype=np.float64)

    def copy(self) -> "Seq2Seq":
        other = Seq2Seq(self.cfg, with_approximator=self.approx is not None)
        other.load_state_dict(self.state_dict())
        other.approx_trained = self.approx_trained
        return other

    # -- batched autograd path ----------------------------------------------
    def _mha(self, prefix: str, xq: Tensor, xkv: Tensor, mask):
        P, H = self.params, self.cfg.H
        q = to_heads(xq @ P[prefix + ".wq"], H)
        k = to_heads(xkv @ P[prefix + ".wk"], H)
        v = to_heads(xkv @ P[prefix + ".wv"], H)
        w = ag.softmax((q @ k.transpose(0, 1, 3, 2)) * self.cfg.attn.scale, axis=-1, mask=mask)
        return merge_heads_t(w @ v) @ P[prefix + ".wo"]

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        P = self.params
        return ag.relu(x @ P[prefix + ".w1"] + P[prefix + ".b1"]) @ P[prefix + ".w2"] + P[prefix + ".b2"]

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _embed(self, ids: np.ndarray, offset: int = 0) -> Tensor:
        L = ids.shape[-1]
        return ag.embedding(self.params["emb"], ids) * np.sqrt(self.cfg.D) + self.pe[offset:offset + L]

    def encode_batch(self, docs: list[np.ndarray]):
        """Encoder states (B, N, D) Tensor and key padding mask (B, N), True = padding."""
        N = max(len(d) for d in docs)
        if N > self.cfg.max_src:
            raise ModelError(f"document of {N} tokens exceeds max_src={self.cfg.max_src}")
        ids = np.full((len(docs), N), PAD_ID, dtype=np.int64)
        for b, d in enumerate(docs):
            if np.any((np.asarray(d) < 0) | (np.asarray(d) >= self.cfg.vocab_size)):
                raise ModelError("token id outside vocabulary")
            ids[b, :len(d)] = d
        pad = ids == PAD_ID
        for b, d in enumerate(docs):
            pad[b, len(d):] = True
            pad[b, :len(d)] = False
        x = self._embed(ids)
        mask = pad[:, None, None, :]
        for i in range(self.cfg.enc_layers):
            x = x + self._mha(f"enc.{i}.self", self._ln(f"enc.{i}.ln1", x), self._ln(f"enc.{i}.ln1", x), mask)
            x = x + self._ffn(f"enc.{i}.ffn", self._ln(f"enc.{i}.ln2", x))
        return self._ln("enc.ln", x), pad

    def encode(self, doc: np.ndarray, part: SentencePartition | None = None) -> np.ndarray:
        """Encoder states (N, D) for one document."""
        if part is not None and part.n_tokens != len(doc):
            raise ModelError("partition inconsistent with document")
        with ag.no_grad():
            enc, _ = self.encode_batch([np.asarray(doc)])
        return enc.data[0]

    def forward_teacher_forced(self, examples: list[EncodedExample], mode=None, need_grad: bool = True,
                               need_approx: bool | None = None, need_saliency: bool = True) -> ForwardOutput:
        """Parallel decoder pass conditioned on the gold prefix.

        Decoder inputs are BOS + summary and targets summary + EOS, so a summary
        of length M yields M+1 steps. ``need_approx`` defaults to "approximator
        attached"; the approximate saliency is then returned for every layer.
        ``need_saliency=False`` skips the ideal saliency when the mode does not
        need it (``alpha`` then holds ``None``).
        """
        mode = Full() if mode is None else mode
        if isinstance(examples, EncodedExample):
            examples = [examples]
        if needs_approximator(mode) and self.approx is None:
            raise ModelError(f"mode {mode.tag} needs an attached approximator")
        if need_approx is None:
            need_approx = self.approx is not None
        ctx = ag.no_grad() if not need_grad else contextlib.nullcontext()
        with ctx:
            return self._forward(examples, mode, need_approx or needs_approximator(mode),
                                 need_saliency or need_approx or not isinstance(mode, Full))

    def _forward(self, examples, mode, need_approx, need_saliency=True) -> ForwardOutput:
        cfg = self.cfg
        B = len(examples)
        parts = [ex.part for ex in examples]
        for ex in examples:
            if ex.part.n_tokens != len(ex.doc):
                raise ModelError("partition inconsistent with document")
        M = max(ex.M for ex in examples) + 1
        if M - 1 > cfg.max_tgt:
            raise ModelError(f"summary longer than max_tgt={cfg.max_tgt}")
        dec_in = np.full((B, M), PAD_ID, dtype=np.int64)
        targets = np.full((B, M), PAD_ID, dtype=np.int64)
        tmask = np.zeros((B, M), dtype=bool)
        for b, ex in enumerate(examples):
            L = ex.M
            dec_in[b, 0] = BOS_ID
            dec_in[b, 1:L + 1] = ex.summary
            targets[b, :L] = ex.summary
            targets[b, L] = EOS_ID
            tmask[b, :L + 1] = True

        enc, pad = self.encode_batch([ex.doc for ex in examples])
        N = enc.shape[1]
        n1max = max(p.n_sentences for p in parts)
        member = np.zeros((B, N, n1max))
        valid = np.zeros((B, n1max), dtype=bool)
        for b, part in enumerate(parts):
            member[b, np.arange(part.n_tokens), part.sentence_ids()] = 1.0
            valid[b, :part.n_sentences] = True
        member4 = member[:, None]                                  # (B, 1, N, N1)
        pad_mask = pad[:, None, None, :]

        Y = None
        if need_approx:
            Y, _ = encode_sentences_batch(enc.data, parts, self.approx)

        rng = None
        drew_ideal = None
        sel_kind = mode.tag
        if isinstance(mode, MixSubset):
            drew_ideal = bool(np.random.default_rng(mode.seed).random() < mode.p_ideal)
            sel_kind = "Ideal" if drew_ideal else "Approx"
        if isinstance(mode, RandomSubset):
            rng = np.random.default_rng(mode.seed)

        causal = np.triu(np.ones((M, M), dtype=bool), k=1)[None, None]
        x = self._embed(dec_in)
        alphas, tildes, sels, weights = [], [], [], []
        P = self.params
        for l in range(cfg.dec_layers):
            h = self._ln(f"dec.{l}.ln1", x)
            x = x + self._mha(f"dec.{l}.self", h, h, causal)
            h = self._ln(f"dec.{l}.ln2", x)
            pre = f"dec.{l}.cross"
            q = to_heads(h @ P[pre + ".wq"], cfg.H)
            k = to_heads(enc @ P[pre + ".wk"], cfg.H)
            v = to_heads(enc @ P[pre + ".wv"], cfg.H)
            logits = (q @ k.transpose(0, 1, 3, 2)) * cfg.attn.scale
            w_full = ag.softmax(logits, axis=-1, mask=pad_mask)
            alpha = w_full @ member4 if need_saliency else None    # (B, H, M, N1)
            tilde = None
            if need_approx:
                tilde = approx_saliency(h, Y, self.approx, l, cfg.attn, sentence_valid=valid)
            sel = None
            if sel_kind == "Ideal":
                sel = top_r_mask(alpha.data.mean(axis=1), mode.r, valid[:, None, :])
            elif sel_kind == "Approx":
                sel = top_r_mask(tilde.data.mean(axis=1), mode.r, valid[:, None, :])
            elif sel_kind == "ModelFree":
                F = np.swapaxes(member4, -1, -2) @ phi(k.data, mode.phi)      # (B, H, N1, dh)
                scores = phi(q.data * cfg.attn.scale, mode.phi) @ np.swapaxes(F, -1, -2)
                rank = model_free_rank(scores.transpose(0, 2, 1, 3))          # (B, M, N1)
                sel = top_r_mask(rank, mode.r, valid[:, None, :])
            elif sel_kind == "Random":
                sel = top_r_mask(rng.random((B, M, n1max)), mode.r, valid[:, None, :])
            if sel is None:
                w_used = w_full
            else:
                excluded = (sel.astype(float) @ np.swapaxes(member, 1, 2)) < 0.5   # (B, M, N)
                w_used = ag.softmax(logits, axis=-1, mask=pad_mask | excluded[:, None])
            x = x + merge_heads_t(w_used @ v) @ P[pre + ".wo"]
            x = x + self._ffn(f"dec.{l}.ffn", self._ln(f"dec.{l}.ln3", x))
            alphas.append(alpha)
            tildes.append(tilde)
            sels.append(sel)
            weights.append(w_full)
        x = self._ln("dec.ln", x)
        logits = x @ ag.transpose(P["emb"], (1, 0))
        return ForwardOutput(logits, targets, tmask, alphas, tildes if need_approx else None, sels, weights,
                             valid, parts, drew_ideal)

    # -- incremental path ---------------------------------------------------
    def start(self, doc: np.ndarray, part: SentencePartition, mode=None, rows: int = 1,
              counter: OpCounter | None = None) -> "DecoderState":
        return DecoderState.create(self, np.asarray(doc), part, Full() if mode is None else mode, rows, counter)


@dataclass
class DecoderState:
    """Per-document incremental decoding state for ``rows`` hypotheses."""

    model: Seq2Seq
    part: SentencePartition
    enc: np.ndarray
    cross_k: list
    cross_v: list
    self_k: list
    self_v: list
    step: int
    counter: OpCounter
    rng: np.random.Generator
    history: list = field(default_factory=list)   # per row: list over steps of per-layer index arrays
    Y: np.ndarray | None = None
    sent_keys: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)
    y_computations: int = 0
    f_computations: int = 0

    @classmethod
    def create(cls, model: Seq2Seq, doc, part, mode, rows, counter):
        cfg = model.cfg
        if part.n_tokens != len(doc):
            raise ModelError("partition inconsistent with document")
        enc = model.encode(doc)
        P = model.params
        ck, cv = [], []
        for l in range(cfg.dec_layers):
            ck.append(np.ascontiguousarray(to_heads(enc @ P[f"dec.{l}.cross.wk"].data, cfg.H)))
            cv.append(np.ascontiguousarray(to_heads(enc @ P[f"dec.{l}.cross.wv"].data, cfg.H)))
        empty = np.zeros((rows, cfg.H, 0, cfg.attn.head_dim))
        seed = getattr(mode, "seed", 0)
        return cls(model, part, enc, ck, cv, [empty] * cfg.dec_layers, [empty] * cfg.dec_layers, 0,
                   counter if counter is not None else OpCounter(), np.random.default_rng(seed),
                   [[] for _ in range(rows)])

    @property
    def rows(self) -> int:
        return len(self.history)

    def ensure_sentence_reps(self):
        if self.Y is None:
            with ag.no_grad():
                y, _ = encode_sentences_batch(self.enc[None], [self.part], self.model.approx, self.counter)
            self.Y = y.data[0]
            self.y_computations += 1
            for l in range(self.model.cfg.dec_layers):
                with ag.no_grad():
                    self.sent_keys[l] = np.ascontiguousarray(
                        sentence_keys(self.Y, self.model.approx, l, self.counter).data)
        return self.Y

    def ensure_features(self, layer: int, phi_name: str):
        key = (layer, phi_name)
        if key not in self.features:
            self.features[key] = model_free_features(self.cross_k[layer], self.part, phi_name, self.counter)
            self.f_computations += 1
        return self.features[key]

    def reorder(self, rows) -> None:
        rows = np.asarray(rows, dtype=np.int64)
        self.self_k = [k[rows] for k in self.self_k]
        self.self_v = [v[rows] for v in self.self_v]
        self.history = [list(self.history[r]) for r in rows]


def decode_step(state: DecoderState, prev_tokens, mode=None, record: bool = False):
    """Advance every hypothesis row by one token.

    Returns (log-probabilities (R, V), per-layer records, state). Records hold
    the selected sentences and, where computed, the ideal saliency ``alpha`` and
    approximate saliency ``alpha_tilde`` (each (R, H, N1)).
    """
    mode = Full() if mode is None else mode
    model = state.model
    cfg = model.cfg
    P = {k: v.data for k, v in model.params.items()}
    prev = np.atleast_1d(np.asarray(prev_tokens, dtype=np.int64))
    R = prev.shape[0]
    if R != state.rows:
        raise ModelError(f"state holds {state.rows} rows, got {R} tokens")
    if needs_approximator(mode) and model.approx is None:
        raise ModelError(f"mode {mode.tag} needs an attached approximator")
    if state.step >= model.pe.shape[0]:
        raise ModelError("decoder ran past the positional table")
    part = state.part
    n1 = part.n_sentences
    scale = cfg.attn.scale
    H, dh = cfg.H, cfg.attn.head_dim
    x = P["emb"][prev] * np.sqrt(cfg.D) + model.pe[state.step]
    sel_kind = mode.tag
    if isinstance(mode, MixSubset):
        sel_kind = "Ideal" if state.rng.random() < mode.p_ideal else "Approx"
    if sel_kind == "Approx":
        state.ensure_sentence_reps()
    records = []
    step_sel = [[] for _ in range(R)]
    for l in range(cfg.dec_layers):
        pre = f"dec.{l}"
        h = _np_layer_norm(x, P[pre + ".ln1.g"], P[pre + ".ln1.b"])
        q = (h @ P[pre + ".self.wq"]).reshape(R, H, 1, dh)
        k = (h @ P[pre + ".self.wk"]).reshape(R, H, 1, dh)
        v = (h @ P[pre + ".self.wv"]).reshape(R, H, 1, dh)
        state.self_k[l] = np.concatenate([state.self_k[l], k], axis=2)
        state.self_v[l] = np.concatenate([state.self_v[l], v], axis=2)
        w = _np_softmax((q @ np.swapaxes(state.self_k[l], -1, -2)) * scale)
        x = x + (w @ state.self_v[l]).reshape(R, cfg.D) @ P[pre + ".self.wo"]

        h = _np_layer_norm(x, P[pre + ".ln2.g"], P[pre + ".ln2.b"])
        qc = (h @ P[pre + ".cross.wq"]).reshape(R, H, dh) * scale
        K, V = state.cross_k[l], state.cross_v[l]
        rec = {}
        if sel_kind == "Full":
            chosen = [np.arange(n1)] * R
            if record:
                rec["alpha"] = _row_saliency(qc, K, part, None)
        elif sel_kind == "Ideal":
            alpha = _row_saliency(qc, K, part, state.counter)
            rec["alpha"] = alpha
            chosen = [top_r_select(a.mean(axis=0), mode.r) for a in alpha]
        elif sel_kind == "Approx":
            qt = (h @ model.approx[f"approx.wq.{l}"].data).reshape(R, H, dh)
            logits = np.einsum("rhd,hnd->rhn", qt, state.sent_keys[l]) * scale
            tilde = _np_softmax(logits)
            state.counter.add("sentence_proj", R * cfg.D * cfg.D)
            state.counter.add("sentence_score", R * n1 * cfg.D)
            state.counter.add("sentence_softmax", R * n1 * H)
            rec["alpha_tilde"] = tilde
            chosen = [top_r_select(t.mean(axis=0), mode.r) for t in tilde]
        elif sel_kind == "ModelFree":
            F = state.ensure_features(l, mode.phi)
            scores = model_free_scores(qc, F, mode.phi, state.counter)
            rank = model_free_rank(scores)
            chosen = [top_r_select(rk, mode.r) for rk in rank]
        elif sel_kind == "Random":
            chosen = [random_select(n1, mode.r, state.rng) for _ in range(R)]
        else:
            raise ModelError(f"unsupported mode {mode!r}")
        rows_tok = [part.token_indices(c) for c in chosen]
        row_ptr = np.concatenate([[0], np.cumsum([len(t) for t in rows_tok])]).astype(np.int64)
        tok = np.concatenate(rows_tok).astype(np.int64)
        att = kernels.subset_attend(np.ascontiguousarray(qc), K, V, row_ptr, tok)
        count_word_level(state.counter, int(row_ptr[-1]), cfg.attn)
        x = x + att.reshape(R, cfg.D) @ P[pre + ".cross.wo"]
        h = _np_layer_norm(x, P[pre + ".ln3.g"], P[pre + ".ln3.b"])
        x = x + np.maximum(h @ P[pre + ".ffn.w1"] + P[pre + ".ffn.b1"], 0.0) @ P[pre + ".ffn.w2"] + P[pre + ".ffn.b2"]
        rec["selected"] = chosen
        records.append(rec)
        for r_ in range(R):
            step_sel[r_].append(chosen[r_])
    x = _np_layer_norm(x, P["dec.ln.g"], P["dec.ln.b"])
    logp = _np_log_softmax(x @ P["emb"].T)
    for r_ in range(R):
        state.history[r_].append(step_sel[r_])
    state.step += 1
    return logp, records, state


def _row_saliency(qc, K, part, counter):
    """Ideal saliency (R, H, N1) from scaled queries (R, H, dh) over all keys (H, N, dh)."""
    logits = np.einsum("rhd,hnd->rhn", qc, K)
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    mass = kernels.segment_sum(e, part.offsets)
    if counter is not None:
        R, H, dh = qc.shape
        counter.add("saliency_score", R * K.shape[1] * H * dh)
        counter.add("saliency_softmax", R * K.shape[1] * H)
    return mass / mass.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

def length_penalty(length: int, alpha: float) -> float:
    """((5 + |Y|) / 6) ** alpha."""
    return ((5.0 + length) / 6.0) ** alpha


@dataclass
class Hypothesis:
    tokens: list
    logprob: float
    score: float
    finished: bool
    plans: list = field(default_factory=list)   # per step: per-layer selected sentence arrays


def greedy_decode(model: Seq2Seq, doc, part: SentencePartition, mode=None, max_len: int | None = None,
                  counter: OpCounter | None = None) -> Hypothesis:
    """Argmax decoding; stops after EOS (kept in ``tokens``) or ``max_len`` tokens."""
    max_len = model.cfg.max_tgt + 1 if max_len is None else max_len
    state = model.start(doc, part, mode, rows=1, counter=counter)
    tokens, lp, prev = [], 0.0, BOS_ID
    for _ in range(max_len):
        logp, _, state = decode_step(state, [prev], mode)
        prev = int(np.argmax(logp[0]))
        lp += float(logp[0, prev])
        tokens.append(prev)
        if prev == EOS_ID:
            break
    return Hypothesis(tokens, lp, lp / length_penalty(len(tokens), model.cfg.length_penalty),
                      tokens[-1] == EOS_ID, state.history[0])


def beam_decode(model: Seq2Seq, doc, part: SentencePartition, mode=None, width: int | None = None,
                alpha: float | None = None, max_len: int | None = None, include_greedy: bool = True,
                counter: OpCounter | None = None) -> Hypothesis:
    """Beam search with score = logprob / ((5+|Y|)/6)^alpha, |Y| counting EOS.

    Each live hypothesis is a row of one :class:`DecoderState`, so sentence
    selection is made per hypothesis. Hypotheses are ranked by log-probability
    for pruning; EOS candidates within the top ``width`` are set aside as
    finished and live beams hitting ``max_len`` are finished as they stand.
    With ``include_greedy`` the greedy hypothesis joins the final pool, so the
    result never scores below greedy decoding.
    """
    cfg = model.cfg
    width = cfg.beam_width if width is None else width
    alpha = cfg.length_penalty if alpha is None else alpha
    max_len = cfg.max_tgt + 1 if max_len is None else max_len
    if width < 1:
        raise ModelError("beam width must be >= 1")
    state = model.start(doc, part, mode, rows=1, counter=counter)
    live_tokens: list[list[int]] = [[]]
    live_lp = np.zeros(1)
    finished: list[Hypothesis] = []
    prev = np.array([BOS_ID])
    for step in range(max_len):
        logp, _, state = decode_step(state, prev, mode)
        V = logp.shape[1]
        cand = (live_lp[:, None] + logp).ravel()
        order = np.argsort(-cand, kind="stable")[: 2 * width]
        keep_rows, keep_tok, keep_lp = [], [], []
        for flat in order:
            row, tok = divmod(int(flat), V)
            seq = live_tokens[row] + [tok]
            if tok == EOS_ID:
                if flat in order[:width]:
                    finished.append(Hypothesis(seq, float(cand[flat]),
                                               float(cand[flat]) / length_penalty(len(seq), alpha), True,
                                               state.history[row]))
                continue
            if len(keep_rows) < width:
                keep_rows.append(row)
                keep_tok.append(tok)
                keep_lp.append(float(cand[flat]))
        if not keep_rows:
            break
        if step == max_len - 1:
            for row, tok, lp in zip(keep_rows, keep_tok, keep_lp):
                seq = live_tokens[row] + [tok]
                finished.append(Hypothesis(seq, lp, lp / length_penalty(len(seq), alpha), False,
                                           state.history[row]))
            break
        state.reorder(keep_rows)
        live_tokens = [live_tokens[r] + [t] for r, t in zip(keep_rows, keep_tok)]
        live_lp = np.array(keep_lp)
        prev = np.array(keep_tok)
    if include_greedy:
        g = greedy_decode(model, doc, part, mode, max_len)
        g.score = g.logprob / length_penalty(len(g.tokens), alpha)
        finished.append(g)
    best = max(finished, key=lambda h: h.score)
    return best


def strip_special(tokens) -> list[int]:
    out = []
    for t in tokens:
        if t == EOS_ID:
            break
        if t not in (BOS_ID, PAD_ID):
            out.append(int(t))
    return out
