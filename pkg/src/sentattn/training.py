"""Losses, optimizer, schedules and the three training regimes.

Regimes:

* ``finetune`` / ``sparse``: all base parameters on ``L_xent + gamma * L_sparse``
  with full cross-attention.
* ``kl-only``: encoder and decoder frozen, approximator trained on ``L_KL``
  against the temperature-sharpened ideal saliency.
* ``integrated``: one teacher-forced pass with top-r subset attention, then two
  half-steps from that pass: the base model takes ``L_xent + lam * L_KL`` with
  the approximate saliency held fixed, the approximator takes ``lam * L_KL``
  with the ideal saliency held fixed.

Batch order derives from ``(seed, epoch)`` and any per-step draw from
``(seed, step)``, so a resumed run replays the uninterrupted one exactly.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import ApproxSubset, Full, IdealSubset, MixSubset, Seq2Seq

EPS = 1e-12
REGIMES = ("finetune", "sparse", "kl-only", "integrated")
SELECTIONS = ("ideal", "approx", "mix")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "finetune"
    gamma: float = 0.0
    lam: float = 0.2
    T: float = 0.5
    r_train: int = 4
    selection: str = "ideal"
    warmup: int = 200
    lr_factor: float = 0.002
    batch_size: int = 16
    grad_accum: int = 1
    seed: int = 0
    max_steps: int = 1000
    epoch_size: int | None = None
    val_every: int = 100
    val_examples: int | None = None
    patience: int = 3

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise TrainingError(f"unknown regime {self.regime!r}; choose from {', '.join(REGIMES)}")
        if self.selection not in SELECTIONS:
            raise TrainingError(f"unknown selection {self.selection!r}; choose from {', '.join(SELECTIONS)}")
        if self.gamma < 0 or self.lam < 0:
            raise TrainingError("gamma and lam must be >= 0")
        if not self.T > 0:
            raise TrainingError("T must be > 0")
        if self.r_train < 1:
            raise TrainingError("r_train must be >= 1")
        if self.patience < 1:
            raise TrainingError("patience must be >= 1")
        if self.batch_size < 1 or self.grad_accum < 1 or self.warmup < 1 or self.val_every < 1:
            raise TrainingError("batch_size, grad_accum, warmup and val_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _as4(x):
    """Coerce saliency records to (B, H, M, N1)."""
    t = ag.as_tensor(x)
    while t.ndim < 4:
        t = t.reshape((1,) + t.shape)
    return t


def _step_average(per_step: Tensor, step_mask) -> Tensor:
    """Mean over valid (B, M) positions of a (B, M) tensor."""
    if step_mask is None:
        return per_step.mean()
    w = np.asarray(step_mask, dtype=np.float64)
    n = w.sum()
    if n == 0:
        raise TrainingError("no valid decoding steps")
    return (per_step * w).sum() * (1.0 / n)


def xent_loss(logits, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is true (default: target != PAD)."""
    logits = ag.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise TrainingError(f"logits {logits.shape} do not match targets {targets.shape}")
    if mask is None:
        mask = targets != 0
    mask = np.asarray(mask, dtype=bool)
    V = logits.shape[-1]
    flat = ag.log_softmax(logits, axis=-1).reshape((-1, V))
    rows = np.flatnonzero(mask.ravel())
    if rows.size == 0:
        raise TrainingError("no target positions")
    picked = flat[rows, targets.ravel()[rows]]
    return -picked.sum() * (1.0 / rows.size)


def _entropy(p: Tensor) -> Tensor:
    return -(p * ag.log(ag.clamp_min(p, EPS))).sum(axis=-1)


def sparsity_entropy_loss(alphas, step_mask=None) -> Tensor:
    """Saliency entropy: per head, head-averaged, averaged over steps, then over layers.

    ``alphas`` is one record or a list of per-layer records shaped
    (B, H, M, N1); lower-rank inputs are read as leading singleton axes.
    """
    records = alphas if isinstance(alphas, (list, tuple)) else [alphas]
    total = None
    for rec in records:
        a = _as4(rec)
        ent = _entropy(a).mean(axis=1)                                     # (B, M)
        term = _step_average(ent, step_mask)
        total = term if total is None else total + term
    return total * (1.0 / len(records))


def temperature_renorm(alpha, T: float, valid=None):
    """softmax(log(max(alpha, 1e-12)) / T) over the last axis; Tensors stay differentiable.

    Entries outside ``valid`` (padding sentences) get exactly zero mass.
    """
    if not T > 0:
        raise TrainingError("T must be > 0")
    mask = None if valid is None else ~np.asarray(valid, dtype=bool)
    if isinstance(alpha, Tensor):
        return ag.softmax(ag.log(ag.clamp_min(alpha, EPS)) * (1.0 / T), axis=-1, mask=mask)
    z = np.log(np.maximum(np.asarray(alpha, dtype=np.float64), EPS)) / T
    if mask is not None:
        z = np.where(mask, -np.inf, z)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_loss(target, approx, step_mask=None) -> Tensor:
    """KL(target || approx), per head then head-averaged, over steps, then over layers.

    Either argument may be a list of per-layer records. Gradients flow into
    whichever side is a Tensor that requires grad; pass ``.detach()`` or an
    array to hold a side fixed.
    """
    targets = target if isinstance(target, (list, tuple)) else [target]
    approxs = approx if isinstance(approx, (list, tuple)) else [approx]
    if len(targets) != len(approxs):
        raise TrainingError("target and approx layer counts differ")
    total = None
    for t, a in zip(targets, approxs):
        t4, a4 = _as4(t), _as4(a)
        kl = (t4 * (ag.log(ag.clamp_min(t4, EPS)) - ag.log(ag.clamp_min(a4, EPS)))).sum(axis=-1)
        term = _step_average(kl.mean(axis=1), step_mask)
        total = term if total is None else total + term
    return total * (1.0 / len(targets))


@dataclass
class LossReport:
    L_xent: float
    L_sparse: float
    L_KL: float | None
    composite: float
    kl_per_layer: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# gradients and optimizer
# ---------------------------------------------------------------------------

def backward(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of ``loss`` for exactly the given named parameters."""
    names = list(params)
    grads = ag.grad(loss, [params[n] for n in names])
    return dict(zip(names, grads))


def lr_schedule(step: int, warmup: int, factor: float) -> float:
    """factor * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise TrainingError("step must be >= 1")
    return factor * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """Bias-corrected Adam without weight decay."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p = params[name]
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array(self.t)}
        for k in self.m:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(np.asarray(arrays[f"{prefix}.t"]).reshape(-1)[0])
        self.m, self.v = {}, {}
        for key, val in arrays.items():
            if key.startswith(prefix + ".m."):
                self.m[key[len(prefix) + 3:]] = np.array(val)
            elif key.startswith(prefix + ".v."):
                self.v[key[len(prefix) + 3:]] = np.array(val)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: Adam, lr: float) -> None:
    state.step(params, grads, lr)


def checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# scheduling helpers
# ---------------------------------------------------------------------------

def mix_probability(step: int, epoch_size: int) -> float:
    """Probability of drawing ideal selection: 1 - step/epoch_size, clamped to [0, 1]."""
    if epoch_size < 1:
        raise TrainingError("epoch_size must be >= 1")
    return min(1.0, max(0.0, 1.0 - step / epoch_size))


def updates_per_epoch(n_examples: int, cfg: TrainConfig) -> int:
    return max(1, n_examples // (cfg.batch_size * cfg.grad_accum))


def micro_batches(n_examples: int, cfg: TrainConfig, step: int) -> list[np.ndarray]:
    """Example indices for each micro-batch of update ``step`` (0-based)."""
    per_epoch = updates_per_epoch(n_examples, cfg)
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([cfg.seed, epoch]).permutation(n_examples)
    out = []
    for a in range(cfg.grad_accum):
        start = (k * cfg.grad_accum + a) * cfg.batch_size
        idx = perm[start:start + cfg.batch_size]
        if idx.size == 0:
            idx = perm[:cfg.batch_size]
        out.append(idx)
    return out


def selection_mode(cfg: TrainConfig, step: int, epoch_size: int):
    if cfg.selection == "ideal":
        return IdealSubset(cfg.r_train)
    if cfg.selection == "approx":
        return ApproxSubset(cfg.r_train)
    seed = int(np.random.default_rng([cfg.seed, step, 17]).integers(2 ** 31))
    return MixSubset(cfg.r_train, mix_probability(step, epoch_size), seed)


# ---------------------------------------------------------------------------
# per-update computations
# ---------------------------------------------------------------------------

def _kl_terms(out, T: float, target_grad: bool, approx_grad: bool):
    """Per-layer (target, approx) pairs with the requested sides held fixed."""
    valid = out.sentence_valid[:, None, None, :]
    targets, approxs = [], []
    for a, t in zip(out.alpha, out.alpha_tilde):
        tgt = temperature_renorm(a if target_grad else a.data, T, valid)
        targets.append(tgt)
        approxs.append(t if approx_grad else t.data)
    return targets, approxs


def sparse_step_grads(model: Seq2Seq, batch, cfg: TrainConfig):
    out = model.forward_teacher_forced(batch, Full(), need_grad=True, need_approx=False,
                                       need_saliency=cfg.gamma > 0)
    lx = xent_loss(out.logits, out.targets, out.target_mask)
    scalars = {"L_xent": float(lx.data)}
    loss = lx
    if cfg.gamma > 0:
        ls = sparsity_entropy_loss(out.alpha, out.target_mask)
        loss = lx + ls * cfg.gamma
        scalars["L_sparse"] = float(ls.data)
    grads = backward(loss, model.named_parameters("base"))
    scalars["composite"] = float(loss.data)
    return grads, scalars


def kl_only_step_grads(model: Seq2Seq, batch, cfg: TrainConfig):
    out = model.forward_teacher_forced(batch, Full(), need_grad=True, need_approx=True)
    tg, ap = _kl_terms(out, cfg.T, target_grad=False, approx_grad=True)
    lk = kl_loss(tg, ap, out.target_mask)
    grads = backward(lk, model.named_parameters("approx"))
    return grads, {"L_KL": float(lk.data), "composite": float(lk.data)}


def integrated_step_grads(model: Seq2Seq, batch, cfg: TrainConfig, mode, xent_fn=None):
    """Both half-step gradients from a single teacher-forced pass.

    Returns (base grads, approximator grads, scalars). ``xent_fn`` replaces the
    cross-entropy term; it exists so tests can perturb that path.
    """
    xent_fn = xent_loss if xent_fn is None else xent_fn
    out = model.forward_teacher_forced(batch, mode, need_grad=True, need_approx=True)
    lx = xent_fn(out.logits, out.targets, out.target_mask)
    tg, ap = _kl_terms(out, cfg.T, target_grad=True, approx_grad=False)
    lk_dec = kl_loss(tg, ap, out.target_mask)
    loss_dec = lx + lk_dec * cfg.lam if cfg.lam else lx
    g_dec = backward(loss_dec, model.named_parameters("base"))
    g_apx = None
    if cfg.lam:
        tg, ap = _kl_terms(out, cfg.T, target_grad=False, approx_grad=True)
        lk_apx = kl_loss(tg, ap, out.target_mask) * cfg.lam
        g_apx = backward(lk_apx, model.named_parameters("approx"))
    scalars = {"L_xent": float(lx.data), "L_KL": float(lk_dec.data), "composite": float(loss_dec.data)}
    if out.drew_ideal is not None:
        scalars["drew_ideal"] = out.drew_ideal
    return g_dec, g_apx, scalars


def evaluate_losses(model: Seq2Seq, examples, cfg: TrainConfig, mode=None, batch_size: int = 32) -> LossReport:
    """Teacher-forced losses over ``examples``, weighted by decoding steps."""
    mode = Full() if mode is None else mode
    need_apx = model.approx is not None
    sx = ss = sk = 0.0
    per_layer = None
    steps = 0
    for start in range(0, len(examples), batch_size):
        batch = examples[start:start + batch_size]
        out = model.forward_teacher_forced(batch, mode, need_grad=False, need_approx=need_apx)
        n = int(out.target_mask.sum())
        sx += float(xent_loss(out.logits, out.targets, out.target_mask).data) * n
        ss += float(sparsity_entropy_loss(out.alpha, out.target_mask).data) * n
        if need_apx:
            tg, ap = _kl_terms(out, cfg.T, False, False)
            layer_kl = [float(kl_loss(t, a, out.target_mask).data) * n for t, a in zip(tg, ap)]
            per_layer = layer_kl if per_layer is None else [x + y for x, y in zip(per_layer, layer_kl)]
            sk += sum(layer_kl) / len(layer_kl)
        steps += n
    lx, ls = sx / steps, ss / steps
    lk = sk / steps if need_apx else None
    if cfg.regime == "kl-only":
        comp = lk
    elif cfg.regime == "integrated":
        comp = lx + cfg.lam * lk
    else:
        comp = lx + cfg.gamma * ls
    return LossReport(lx, ls, lk, comp, [x / steps for x in per_layer] if per_layer else [])


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    history: list
    steps: int
    best_metric: float
    best_step: int
    stopped_early: bool


class Trainer:
    """Runs one regime; owns the optimizers, step counter and early-stopping state."""

    def __init__(self, model: Seq2Seq, train, val, cfg: TrainConfig, run_dir=None, xent_fn=None, vocab=None):
        if not train:
            raise TrainingError("empty training set")
        if cfg.regime in ("kl-only", "integrated") and model.approx is None:
            raise TrainingError(f"regime {cfg.regime} needs an attached approximator")
        if cfg.regime == "integrated" and cfg.selection in ("approx", "mix") and not getattr(
                model, "approx_trained", False):
            warnings.warn("approximate selection with an untrained approximator", stacklevel=2)
        self.model, self.train, self.cfg = model, list(train), cfg
        self.val = list(val)[: cfg.val_examples] if cfg.val_examples else list(val)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.epoch_size = cfg.epoch_size or updates_per_epoch(len(self.train), cfg)
        self.opt_base = Adam()
        self.opt_apx = Adam()
        self.xent_fn = xent_fn
        self.vocab = vocab
        self.step = 0
        self.history: list[dict] = []
        self.best = math.inf
        self.best_step = 0
        self.bad = 0
        self.stopped = False

    # -- one update ---------------------------------------------------------
    def update(self) -> dict:
        cfg, model = self.cfg, self.model
        lr = lr_schedule(self.step + 1, cfg.warmup, cfg.lr_factor)
        acc_base, acc_apx, scalars = None, None, []
        for idx in micro_batches(len(self.train), cfg, self.step):
            batch = [self.train[i] for i in idx]
            g_apx = None
            if cfg.regime in ("finetune", "sparse"):
                g_base, s = sparse_step_grads(model, batch, cfg)
            elif cfg.regime == "kl-only":
                g_base, s = None, None
                g_apx, s = kl_only_step_grads(model, batch, cfg)
            else:
                mode = selection_mode(cfg, self.step, self.epoch_size)
                g_base, g_apx, s = integrated_step_grads(model, batch, cfg, mode, self.xent_fn)
            acc_base = _accumulate(acc_base, g_base)
            acc_apx = _accumulate(acc_apx, g_apx)
            scalars.append(s)
            if not all(math.isfinite(v) for v in s.values() if isinstance(v, float)):
                raise TrainingError(f"non-finite loss at step {self.step + 1}")
        k = 1.0 / cfg.grad_accum
        if acc_base is not None:
            self.opt_base.step(model.named_parameters("base"), {n: g * k for n, g in acc_base.items()}, lr)
        if acc_apx is not None:
            self.opt_apx.step(model.named_parameters("approx"), {n: g * k for n, g in acc_apx.items()}, lr)
        self.step += 1
        rec = {key: float(np.mean([s[key] for s in scalars])) for key in scalars[0] if key != "drew_ideal"}
        rec["lr"] = lr
        return rec

    # -- validation ---------------------------------------------------------
    def val_mode(self):
        if self.cfg.regime != "integrated":
            return Full()
        if self.cfg.selection == "ideal":
            return IdealSubset(self.cfg.r_train)
        return ApproxSubset(self.cfg.r_train)

    def validate(self) -> dict:
        rep = evaluate_losses(self.model, self.val or self.train[:64], self.cfg, self.val_mode())
        rec = {"step": self.step, "lr": lr_schedule(max(self.step, 1), self.cfg.warmup, self.cfg.lr_factor),
               "L_xent": rep.L_xent, "L_sparse": rep.L_sparse, "L_KL": rep.L_KL, "composite": rep.composite}
        metric = rep.L_KL if self.cfg.regime == "kl-only" else rep.L_xent
        if metric < self.best:
            self.best, self.best_step, self.bad = metric, self.step, 0
            rec["improved"] = True
            if self.run_dir is not None:
                from .checkpoint import save_checkpoint
                save_checkpoint(self.run_dir / "best.npz", self.model, self.vocab)
        else:
            self.bad += 1
            rec["improved"] = False
            if self.bad >= self.cfg.patience:
                self.stopped = True
        self.history.append(rec)
        if self.run_dir is not None:
            with open(self.run_dir / "train_log.jsonl", "a", newline="\n") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec

    # -- loop ---------------------------------------------------------------
    def run(self, stop_at: int | None = None) -> TrainResult:
        """Train until ``max_steps`` (or ``stop_at``, for interruption) or early stopping."""
        limit = self.cfg.max_steps if stop_at is None else min(stop_at, self.cfg.max_steps)
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        while self.step < limit and not self.stopped:
            self.update()
            if self.step % self.cfg.val_every == 0 or self.step == self.cfg.max_steps:
                self.validate()
            if self.run_dir is not None and (self.step % self.cfg.val_every == 0 or self.step == limit):
                self.save_state(self.run_dir / "last.npz")
        if self.cfg.regime == "kl-only" or (self.cfg.regime == "integrated" and self.cfg.lam > 0):
            self.model.approx_trained = True
        return TrainResult(self.history, self.step, self.best, self.best_step, self.stopped)

    # -- resume -------------------------------------------------------------
    def save_state(self, path) -> None:
        from .checkpoint import save_checkpoint
        extra = {}
        extra.update(self.opt_base.state("optim.base"))
        extra.update(self.opt_apx.state("optim.approx"))
        meta = {"step": self.step, "best": self.best, "best_step": self.best_step, "bad": self.bad,
                "stopped": self.stopped, "history": self.history, "train_config": self.cfg.to_dict()}
        save_checkpoint(path, self.model, self.vocab, extra_arrays=extra, train_state=meta)

    def load_state(self, path) -> None:
        from .checkpoint import load_checkpoint
        model, _, meta, extra = load_checkpoint(path, with_extra=True)
        if meta is None:
            raise TrainingError(f"{path} holds no training state")
        self.model.load_state_dict(model.state_dict())
        self.model.approx_trained = getattr(model, "approx_trained", False)
        self.opt_base.load("optim.base", extra)
        self.opt_apx.load("optim.approx", extra)
        self.step, self.best, self.best_step = meta["step"], meta["best"], meta["best_step"]
        self.bad, self.stopped, self.history = meta["bad"], meta["stopped"], meta["history"]


def _accumulate(acc, grads):
    if grads is None:
        return acc
    if acc is None:
        return {k: v.copy() for k, v in grads.items()}
    for k, v in grads.items():
        acc[k] += v
    return acc


def train_sparse_finetune(model: Seq2Seq, train, val, cfg: TrainConfig, run_dir=None) -> TrainResult:
    """Minimise L_xent + gamma * L_sparse over all base parameters."""
    if cfg.regime not in ("finetune", "sparse"):
        cfg = replace(cfg, regime="sparse")
    return Trainer(model, train, val, cfg, run_dir).run()


def train_kl_only(model: Seq2Seq, train, val, cfg: TrainConfig, run_dir=None) -> TrainResult:
    """Train only the approximator on L_KL; the base model stays bit-identical."""
    if cfg.regime != "kl-only":
        cfg = replace(cfg, regime="kl-only")
    return Trainer(model, train, val, cfg, run_dir).run()


def train_integrated(model: Seq2Seq, train, val, cfg: TrainConfig, run_dir=None, xent_fn=None) -> TrainResult:
    """Interleaved base/approximator training around the top-r selection."""
    if cfg.regime != "integrated":
        cfg = replace(cfg, regime="integrated")
    return Trainer(model, train, val, cfg, run_dir, xent_fn).run()
