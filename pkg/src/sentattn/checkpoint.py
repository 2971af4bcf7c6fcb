"""Single-file checkpoints: a zip of ``.npy`` members keyed by canonical parameter names.

Besides parameters the archive holds ``__format__`` (the format tag),
``__config__`` (model config JSON), and optionally ``__vocab__`` and
``__train_state__`` (JSON) plus optimizer arrays under ``optim.*``. Member
timestamps are fixed so equal contents give equal bytes.
"""
from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np

from .corpus import Vocab
from .model import ModelConfig, Seq2Seq

FORMAT_TAG = "sentattn-checkpoint/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _text(value: str) -> np.ndarray:
    return np.frombuffer(value.encode("utf-8"), dtype=np.uint8)


def _read_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    os.replace(tmp, path)


def load_arrays(path) -> dict[str, np.ndarray]:
    try:
        with zipfile.ZipFile(path) as zf:
            out = {}
            for name in zf.namelist():
                if not name.endswith(".npy"):
                    raise CheckpointError(f"{path}: unexpected member {name}")
                out[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
            return out
    except (zipfile.BadZipFile, OSError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from exc


def save_checkpoint(path, model: Seq2Seq, vocab: Vocab | None = None, extra_arrays: dict | None = None,
                    train_state: dict | None = None) -> None:
    arrays = dict(model.state_dict())
    arrays["__format__"] = _text(FORMAT_TAG)
    arrays["__config__"] = _text(model.cfg.to_json())
    arrays["__approx_trained__"] = np.array(bool(model.approx_trained))
    if vocab is not None:
        arrays["__vocab__"] = _text(json.dumps(vocab.to_json()))
    if train_state is not None:
        arrays["__train_state__"] = _text(json.dumps(train_state, sort_keys=True))
    for k, v in (extra_arrays or {}).items():
        if not k.startswith("optim."):
            raise CheckpointError(f"extra array {k!r} must live under optim.")
        arrays[k] = v
    save_arrays(path, arrays)


def load_checkpoint(path, with_extra: bool = False):
    """Returns (model, vocab or None, train_state or None[, optimizer arrays])."""
    arrays = load_arrays(path)
    if "__format__" not in arrays or _read_text(arrays["__format__"]) != FORMAT_TAG:
        raise CheckpointError(f"{path}: missing or unknown format tag")
    cfg = ModelConfig.from_json(_read_text(arrays["__config__"]))
    params = {k: v for k, v in arrays.items() if not k.startswith("__") and not k.startswith("optim.")}
    model = Seq2Seq(cfg, with_approximator=any(k.startswith("approx.") for k in params))
    model.load_state_dict(params)
    model.approx_trained = bool(arrays.get("__approx_trained__", np.array(False)))
    vocab = Vocab.from_json(json.loads(_read_text(arrays["__vocab__"]))) if "__vocab__" in arrays else None
    state = json.loads(_read_text(arrays["__train_state__"])) if "__train_state__" in arrays else None
    if with_extra:
        return model, vocab, state, {k: v for k, v in arrays.items() if k.startswith("optim.")}
    return model, vocab, state
