"""``sentattn`` command line: gen-data, train, eval, bench, plot.

Every subcommand reads an optional flat config file (``--config``), then
``SENTATTN_<KEY>`` environment variables, then flags. The effective config is
written next to the outputs before any work starts. Failures print one line,
``sentattn: error: <Kind>: <message>``, and exit non-zero.
"""
from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import bench as bn
from .attention import retained_curve, write_retained_curve
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, dump_config, read_config, resolve
from .corpus import SyntheticSpec, dataset_statistics, encode_example, generate_synthetic_dataset, load_dataset, \
    save_dataset, vocab_for
from .evaluation import evaluate_matrix, export_attention_maps, read_matrix_csv, read_metrics, write_metrics
from .model import ApproxSubset, Full, IdealSubset, ModelConfig, ModelFreeSubset, RandomSubset, Seq2Seq
from .training import TrainConfig, Trainer

GEN_DEFAULTS = {
    "out": "data.jsonl", "num_examples": 1000, "n_sentences": "12", "sentence_len": "4-6", "salient": 3,
    "vocab_size": 120, "noise": 0.0, "seed": 0,
}
TRAIN_DEFAULTS = {
    "data": "", "val_data": "", "val_fraction": 0.1, "run_dir": "run", "init": "", "regime": "finetune",
    "gamma": 0.0, "lam": 0.2, "T": 0.5, "r": 4, "selection": "ideal", "warmup": 200, "lr_factor": 0.002,
    "batch_size": 16, "grad_accum": 1, "max_steps": 1000, "epoch_size": None, "val_every": 100,
    "val_examples": None, "patience": 3, "seed": 0, "d_model": 64, "heads": 4, "ffn": 256, "enc_layers": 2,
    "dec_layers": 2, "ds": 64, "gru_layers": 2, "max_src": 256, "max_tgt": 64,
}
EVAL_DEFAULTS = {
    "checkpoint": "", "data": "", "out": "metrics.csv", "modes": "full,ideal,approx,random", "r_list": "4",
    "search": "beam", "width": 4, "alpha": 2.0, "max_len": None, "limit": None, "threads": 1,
    "train_mode": "", "seed": 0,
}
BENCH_DEFAULTS = {
    "out_dir": "bench", "fixed_n": 256, "m_list": "16,64,112,160,208,256", "grid": False, "grid_m": "8,20,32,44,56",
    "grid_n": "96,128,160,192,224,256", "grid_mode": "Inference", "iters": 20, "warmup": 2, "batch": 16,
    "self_test": False, "seed": 0, "d_model": 64, "heads": 4, "layers": 2,
}
PLOT_DEFAULTS = {
    "what": "retained-curve", "checkpoint": "", "data": "", "out_dir": "plots", "layer": None, "example": 1,
    "r_list": "", "limit": None, "seed": 0,
}


class CliError(RuntimeError):
    pass


def int_list(text: str) -> list[int]:
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def int_range(text: str) -> tuple[int, int]:
    vals = [int(v) for v in str(text).split("-")]
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) != 2:
        raise CliError(f"bad range {text!r}")
    return vals[0], vals[1]


def _effective(defaults: dict, args) -> dict:
    file_values = read_config(args.config) if args.config else {}
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "force", "resume", "stop_at")}
    return resolve(defaults, file_values, flags)


def _fresh_file(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise CliError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)


def _fresh_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise CliError(f"{path} is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _echo(cfg: dict, path: Path) -> None:
    path.write_text(dump_config(cfg), encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _effective(GEN_DEFAULTS, args)
    out = Path(cfg["out"])
    _fresh_file(out, args.force)
    spec = SyntheticSpec(cfg["num_examples"], int_range(cfg["n_sentences"]), int_range(cfg["sentence_len"]),
                         cfg["salient"], cfg["vocab_size"], cfg["noise"], cfg["seed"])
    examples = generate_synthetic_dataset(spec)
    save_dataset(examples, out)
    stats = dataset_statistics(examples)
    if len(load_dataset(out)) != len(examples):
        raise CliError(f"{out} failed validation after writing")
    Path(str(out) + ".stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    _echo(cfg, Path(str(out) + ".config.txt"))
    print(json.dumps(stats, sort_keys=True))
    return 0


def _split(examples, cfg):
    if cfg["val_data"]:
        return examples, load_dataset(cfg["val_data"])
    n_val = max(1, int(round(len(examples) * cfg["val_fraction"])))
    if n_val >= len(examples):
        raise CliError("dataset too small to split off a validation set")
    return examples[:-n_val], examples[-n_val:]


def cmd_train(args) -> int:
    cfg = _effective(TRAIN_DEFAULTS, args)
    if not cfg["data"]:
        raise CliError("--data is required")
    run_dir = Path(cfg["run_dir"])
    if args.resume:
        if not (run_dir / "last.npz").is_file():
            raise CliError(f"nothing to resume in {run_dir}")
    else:
        _fresh_dir(run_dir, args.force)
    train_raw, val_raw = _split(load_dataset(cfg["data"]), cfg)
    if cfg["init"]:
        model, vocab, _ = load_checkpoint(cfg["init"])
        if vocab is None:
            raise CliError(f"{cfg['init']} carries no vocabulary")
    else:
        if cfg["regime"] == "kl-only":
            raise CliError("regime kl-only needs --init with a trained base model")
        vocab = vocab_for(train_raw)
        mcfg = ModelConfig(len(vocab), D=cfg["d_model"], H=cfg["heads"], ffn=cfg["ffn"],
                           enc_layers=cfg["enc_layers"], dec_layers=cfg["dec_layers"], max_src=cfg["max_src"],
                           max_tgt=cfg["max_tgt"], Ds=cfg["ds"], gru_layers=cfg["gru_layers"], seed=cfg["seed"])
        model = Seq2Seq(mcfg, with_approximator=False)
    if cfg["regime"] in ("kl-only", "integrated") and model.approx is None:
        model.attach_approximator(seed=cfg["seed"] + 7919)
    tcfg = TrainConfig(regime=cfg["regime"], gamma=cfg["gamma"], lam=cfg["lam"], T=cfg["T"], r_train=cfg["r"],
                       selection=cfg["selection"], warmup=cfg["warmup"], lr_factor=cfg["lr_factor"],
                       batch_size=cfg["batch_size"], grad_accum=cfg["grad_accum"], seed=cfg["seed"],
                       max_steps=cfg["max_steps"], epoch_size=cfg["epoch_size"], val_every=cfg["val_every"],
                       val_examples=cfg["val_examples"], patience=cfg["patience"])
    if not args.resume:
        _echo(cfg, run_dir / "config.txt")
    train = [encode_example(e, vocab) for e in train_raw]
    val = [encode_example(e, vocab) for e in val_raw]
    trainer = Trainer(model, train, val, tcfg, run_dir, vocab=vocab)
    if args.resume:
        trainer.load_state(run_dir / "last.npz")
    result = trainer.run(stop_at=args.stop_at)
    save_checkpoint(run_dir / "model.npz", model, vocab)
    summary = {"steps": result.steps, "best_metric": result.best_metric, "best_step": result.best_step,
               "stopped_early": result.stopped_early, "parameters": model.parameter_count("all"),
               "approx_parameters": model.parameter_count("approx")}
    (run_dir / "result.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    load_checkpoint(run_dir / "model.npz")
    print(json.dumps(summary, sort_keys=True))
    return 0


def mode_factories(spec: str, seed: int):
    out = []
    for name in [s.strip().lower() for s in spec.split(",") if s.strip()]:
        base, _, arg = name.partition(":")
        if base == "full":
            out.append(Full())
        elif base == "ideal":
            out.append(IdealSubset)
        elif base == "approx":
            out.append(ApproxSubset)
        elif base == "random":
            out.append(lambda r, s=seed: RandomSubset(r, s))
        elif base == "modelfree":
            out.append(lambda r, phi=arg or "elu_plus_one": ModelFreeSubset(r, phi))
        else:
            raise CliError(f"unknown mode {name!r}")
    return out


def _load_model_and_data(cfg):
    if not cfg["checkpoint"] or not cfg["data"]:
        raise CliError("--checkpoint and --data are required")
    model, vocab, _ = load_checkpoint(cfg["checkpoint"])
    if vocab is None:
        raise CliError(f"{cfg['checkpoint']} carries no vocabulary")
    examples = load_dataset(cfg["data"])
    if cfg.get("limit"):
        examples = examples[: cfg["limit"]]
    return model, [encode_example(e, vocab) for e in examples]


def cmd_eval(args) -> int:
    cfg = _effective(EVAL_DEFAULTS, args)
    out = Path(cfg["out"])
    _fresh_file(out, args.force)
    _echo(cfg, Path(str(out) + ".config.txt"))
    model, examples = _load_model_and_data(cfg)
    rows = evaluate_matrix(model, examples, mode_factories(cfg["modes"], cfg["seed"]), int_list(cfg["r_list"]),
                           cfg["search"], cfg["width"], cfg["alpha"], cfg["max_len"], cfg["threads"])
    meta = {"train_mode": cfg["train_mode"], "examples": len(examples), "search": cfg["search"],
            "width": cfg["width"], "alpha": cfg["alpha"]}
    write_metrics(rows, out, meta)
    if len(read_metrics(out)) != len(rows):
        raise CliError(f"{out} failed validation after writing")
    for row in rows:
        print(",".join(row.csv_row()))
    return 0


def cmd_bench(args) -> int:
    cfg = _effective(BENCH_DEFAULTS, args)
    out_dir = Path(cfg["out_dir"])
    _fresh_dir(out_dir, args.force)
    _echo(cfg, out_dir / "config.txt")
    if cfg["self_test"]:
        quad = bn.fit_quadratic(bn.synthetic_samples((1.0, 1e-2, 1e-4), int_list(cfg["m_list"])))
        biv = bn.fit_bivariate(bn.synthetic_samples((1.0, 3e-3, 3e-3, 1.5e-6, 7e-7, 8e-7),
                                                    int_list(cfg["grid_m"]), int_list(cfg["grid_n"])))
        ok = quad.r2 > 1 - 1e-12 and biv.r2 > 1 - 1e-12
        bn.write_fit_json({"synthetic": quad}, out_dir / "fit.json", {"bivariate": biv.to_dict(), "self_test_ok": ok})
        if not ok:
            raise CliError("self-test failed to recover exact coefficients")
        print(json.dumps({"self_test_ok": ok}))
        return 0
    N = cfg["fixed_n"]
    m_list = int_list(cfg["m_list"])
    grid_m, grid_n = int_list(cfg["grid_m"]), int_list(cfg["grid_n"])
    max_n = max([N] + (grid_n if cfg["grid"] else []))
    max_m = max(m_list + (grid_m if cfg["grid"] else []))
    model = bn.bench_model(max_n, max_m, cfg["d_model"], cfg["heads"], cfg["layers"], seed=cfg["seed"])
    per_mode = bn.time_modes(model, N, m_list, cfg["iters"], cfg["warmup"], cfg["batch"], seed=cfg["seed"])
    samples = [s for mode in per_mode.values() for s in mode]
    fits = {mode: bn.fit_quadratic(s, mode) for mode, s in per_mode.items()}
    extra = {}
    if cfg["grid"]:
        grid = bn.time_grid(model, grid_m, grid_n, cfg["grid_mode"], cfg["iters"], cfg["warmup"], cfg["batch"],
                            seed=cfg["seed"])
        samples += grid
        biv = bn.fit_bivariate(grid, cfg["grid_mode"])
        extra["bivariate"] = biv.to_dict()
    bn.write_timing_csv(samples, out_dir / "timing.csv")
    bn.write_fit_json(fits, out_dir / "fit.json", extra)
    for row in bn.ratio_table(fits):
        print(json.dumps(row, sort_keys=True))
    if "bivariate" in extra:
        print(json.dumps({"c4": extra["bivariate"]["coefficients"]["c4"],
                          "c5": extra["bivariate"]["coefficients"]["c5"],
                          "c4>c5": extra["bivariate"]["ratios"]["c4>c5"]}))
    return 0


def cmd_plot(args) -> int:
    cfg = _effective(PLOT_DEFAULTS, args)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    model, examples = _load_model_and_data(cfg)
    if cfg["what"] == "retained-curve":
        out = out_dir / "retained_curve.csv"
        _fresh_file(out, args.force)
        r_values = int_list(cfg["r_list"]) or list(range(1, max(e.part.n_sentences for e in examples) + 1))
        layers = None if cfg["layer"] is None else [cfg["layer"] - 1]
        curve = retained_curve(model, examples, r_values, layers)
        write_retained_curve(curve, out, {"averaging": "pooled over all decoding steps of all examples",
                                          "examples": len(examples)})
        print(out)
    elif cfg["what"] == "heatmap":
        idx = cfg["example"] - 1
        if not 0 <= idx < len(examples):
            raise CliError(f"example {cfg['example']} outside 1..{len(examples)}")
        layers = range(model.cfg.dec_layers) if cfg["layer"] is None else [cfg["layer"] - 1]
        for layer in layers:
            paths = export_attention_maps(model, examples[idx], layer, out_dir, f"example{cfg['example']}")
            sent = read_matrix_csv(paths["sentence"])
            if not np.allclose(sent.sum(axis=1), 1.0, atol=1e-6):
                raise CliError("sentence-level rows do not sum to 1")
            for p in paths.values():
                print(p)
    else:
        raise CliError(f"unknown plot {cfg['what']!r}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _flags(sub, defaults: dict, extra_help: dict | None = None):
    for key, default in defaults.items():
        flag = "--" + key.replace("_", "-")
        kw = {"dest": key, "default": None, "help": (extra_help or {}).get(key, f"default: {default}")}
        if isinstance(default, bool):
            kw["action"] = "store_const"
            kw["const"] = "true"
        sub.add_argument(flag, **kw)
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sentattn", description=__doc__.splitlines()[0])
    subs = p.add_subparsers(dest="command", required=True)
    s = subs.add_parser("gen-data", help="write a synthetic JSONL dataset")
    _flags(s, GEN_DEFAULTS)
    s = subs.add_parser("train", help="train one regime into a run directory")
    _flags(s, TRAIN_DEFAULTS, {"regime": "finetune | sparse | kl-only | integrated",
                                "selection": "ideal | approx | mix", "lam": "KL weight (also --lambda)"})
    s.add_argument("--lambda", dest="lam", default=None, help=argparse.SUPPRESS)
    s.add_argument("--resume", action="store_true", help="continue from run_dir/last.npz")
    s.add_argument("--stop-at", type=int, default=None, help="stop after this many updates (resumable)")
    s = subs.add_parser("eval", help="ROUGE / selection-recall sweep over modes and r")
    _flags(s, EVAL_DEFAULTS, {"modes": "comma list of full, ideal, approx, random, modelfree[:phi]"})
    s = subs.add_parser("bench", help="time the three operating modes and fit the cost models")
    _flags(s, BENCH_DEFAULTS)
    s = subs.add_parser("plot", help="retained-weight curve or attention heatmaps")
    _flags(s, PLOT_DEFAULTS, {"what": "retained-curve | heatmap", "layer": "1-based decoder layer"})
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "plot": cmd_plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CliError, ConfigError, ValueError, RuntimeError, OSError, KeyError) as exc:
        kind = type(exc).__name__
        msg = " ".join(str(exc).split()) or kind
        print(f"sentattn: error: {kind}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
