"""Command-line entry point: ``bitquant {fit,train,bench,speedup,pack}``.

Every option can also come from a ``--config`` file of ``key=value`` lines
(``#`` starts a comment; keys use the long flag name with ``-`` or ``_``).
Precedence is defaults < config file < flags, and the resolved options are
echoed to ``run.json`` in the output directory before the command runs.

Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import __version__
from .errors import BitQuantError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SEED_ENV = "BITQUANT_SEED"


class UsageError(Exception):
    pass


# --- option parsing --------------------------------------------------------------------

def _int_list(text: str) -> list:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _bit_pairs(text: str) -> list:
    """``"1/1,2/2"`` -> ``[[1, 1], [2, 2]]``."""
    pairs = []
    for tok in _str_list(text):
        parts = tok.split("/")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"bit pair must look like KW/KA, got {tok!r}")
        try:
            pairs.append([int(parts[0]), int(parts[1])])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bit pair must be integers, got {tok!r}") from None
    return pairs


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


@dataclass
class Opt:
    name: str  # long flag without dashes, underscores for the config key
    type: Callable[[str], Any]
    default: Any
    help: str
    choices: Optional[tuple] = None
    flag: bool = False  # store_true switch

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


def _env_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _common(name: str) -> list:
    return [Opt("out", str, f"bitquant_runs/{name}", "output directory")]


COMMANDS = {
    "fit": [
        Opt("input", str, "synth", "'synth' or a .npy / IDX file holding a (B, C, H, W) tensor"),
        Opt("bits", int, 2, "activation bit-width K"),
        Opt("iters", int, 1, "alternating rounds per CAQ step"),
        Opt("mu", float, 0.9, "EMA momentum of the channel bases"),
        Opt("channels", int, 96, "channels of the synthetic input"),
        Opt("batch", int, 32, "batch size of the synthetic input"),
        Opt("seed", int, None, f"seed of the synthetic input (default ${SEED_ENV} or 0)"),
        Opt("report", str, None, "per-channel MSE CSV (default OUT/channel_mse.csv)"),
    ],
    "train": [
        Opt("task", str, "synth", "synthetic blobs or IDX files", choices=("synth", "idx")),
        Opt("images", str, None, "IDX image file (task idx)"),
        Opt("labels", str, None, "IDX label file (task idx)"),
        Opt("eval-images", str, None, "IDX image file for evaluation (task idx)"),
        Opt("eval-labels", str, None, "IDX label file for evaluation (task idx)"),
        Opt("n-per-class", int, 64, "synthetic samples per class"),
        Opt("data-seed", int, 0, "seed of the synthetic training set (eval set uses seed + 1)"),
        Opt("kw", int, 2, "weight bit-width"),
        Opt("ka", int, 2, "activation bit-width"),
        Opt("weights", str, "lqw", "weight mode", choices=("fp", "lqw")),
        Opt("acts", str, "caq", "activation mode", choices=("fp", "caq", "global")),
        Opt("epochs", int, 200, "training epochs"),
        Opt("batch-size", int, 64, "mini-batch size"),
        Opt("lr", float, None, "base learning rate (default: tinynet default)"),
        Opt("seed", int, None, f"model seed (default ${SEED_ENV} or 0)"),
        Opt("ablate", _bool, False, "also run the weight x activation ablation grid", flag=True),
        Opt("ablate-weights", _str_list, "fp,lqw", "weight modes of the ablation grid"),
        Opt("ablate-acts", _str_list, "fp,caq,global", "activation modes of the ablation grid"),
        Opt("ablate-seeds", _int_list, "1,2,3", "seeds of the ablation grid"),
    ],
    "bench": [
        Opt("n", int, 256, "output channels"),
        Opt("m", int, 14 * 14 * 100, "output positions"),
        Opt("kernel-size", int, 3, "convolution kernel size"),
        Opt("ci-sweep", _int_list, "32,64,128,256,512,1024,2048,4096", "input channel sweep"),
        Opt("bits", _bit_pairs, "1/1,2/2", "bit-width pairs KW/KA"),
        Opt("threads", _int_list, "1", "thread counts"),
        Opt("reps", int, 5, "timed repetitions (>= 3)"),
        Opt("kernels", _str_list, "naive,blocked,bitwise", "kernels to time"),
        Opt("word-bits", int, 64, "packing word size", choices=(32, 64)),
        Opt("seed", int, None, f"problem seed (default ${SEED_ENV} or 0)"),
        Opt("csv", str, None, "timing CSV (default OUT/bench.csv)"),
    ],
    "speedup": [
        Opt("kw", int, 1, "weight bit-width"),
        Opt("ka", int, 1, "activation bit-width"),
        Opt("q", int, 10 ** 6, "dot product length"),
        Opt("L", int, 64, "word size in bits"),
        Opt("gamma", float, 1.91, "throughput ratio of bitwise to float instructions"),
    ],
    "pack": [
        Opt("checkpoint", str, None, "trained checkpoint (.bqck)"),
        Opt("name", str, "model.bqpk", "file name of the packed model inside OUT"),
        Opt("word-bits", int, 64, "packing word size", choices=(32, 64)),
        Opt("seed", int, None, f"seed of the verification inputs (default ${SEED_ENV} or 0)"),
    ],
}


def _options(cmd: str) -> list:
    return COMMANDS[cmd] + _common(cmd)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitquant", description="Low-bit quantization toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="key=value file of option overrides")
        for o in _options(cmd):
            if o.flag:
                p.add_argument(f"--{o.name}", dest=o.dest, action="store_true", default=None, help=o.help)
            else:
                p.add_argument(f"--{o.name}", dest=o.dest, type=o.type, default=None,
                               choices=o.choices, help=f"{o.help} (default: {o.default})")
    return parser


def read_config_file(path, cmd: str) -> dict:
    known = {o.dest: o for o in _options(cmd)}
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown option {key!r} for {cmd}")
        o = known[key]
        try:
            v = o.type(value)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
        if o.choices is not None and v not in o.choices:
            raise UsageError(f"{path}:{lineno}: {key} must be one of {o.choices}")
        out[key] = v
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cmd = args.command
    cfg = {}
    for o in _options(cmd):
        cfg[o.dest] = o.type(o.default) if isinstance(o.default, str) and o.type is not str else o.default
    if args.config:
        cfg.update(read_config_file(args.config, cmd))
    for o in _options(cmd):
        v = getattr(args, o.dest)
        if v is not None:
            cfg[o.dest] = v
    if "seed" in cfg and cfg["seed"] is None:
        cfg["seed"] = _env_seed()
    VALIDATORS[cmd](cfg)
    return cfg


# --- validation ------------------------------------------------------------------------

def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise UsageError(msg)


def _check_bits(k, name: str) -> None:
    _require(1 <= k <= 8, f"{name} must be in [1, 8], got {k}")


def _validate_fit(c: dict) -> None:
    _check_bits(c["bits"], "--bits")
    _require(c["iters"] >= 1, "--iters must be >= 1")
    _require(0.0 <= c["mu"] <= 1.0, "--mu must lie in [0, 1]")
    _require(c["channels"] >= 1 and c["batch"] >= 1, "--channels and --batch must be positive")


def _validate_train(c: dict) -> None:
    _check_bits(c["kw"], "--kw")
    _check_bits(c["ka"], "--ka")
    _require(c["epochs"] >= 0, "--epochs must be >= 0")
    _require(c["batch_size"] >= 1, "--batch-size must be positive")
    _require(c["n_per_class"] >= 1, "--n-per-class must be positive")
    _require(c["lr"] is None or c["lr"] > 0, "--lr must be positive")
    if c["task"] == "idx":
        _require(c["images"] is not None and c["labels"] is not None,
                 "--task idx needs --images and --labels")
        _require((c["eval_images"] is None) == (c["eval_labels"] is None),
                 "--eval-images and --eval-labels go together")
    else:
        given = [k for k in ("images", "labels", "eval_images", "eval_labels") if c[k] is not None]
        _require(not given, f"--task synth conflicts with {', '.join('--' + g.replace('_', '-') for g in given)}")
    if c["ablate"]:
        _require(c["ablate_weights"] and set(c["ablate_weights"]) <= {"fp", "lqw"},
                 "--ablate-weights takes fp and/or lqw")
        _require(c["ablate_acts"] and set(c["ablate_acts"]) <= {"fp", "caq", "global"},
                 "--ablate-acts takes fp, caq and/or global")
        _require(len(c["ablate_seeds"]) >= 1, "--ablate-seeds must not be empty")


def _validate_bench(c: dict) -> None:
    _require(min(c["n"], c["m"], c["kernel_size"]) >= 1, "--n, --m and --kernel-size must be positive")
    _require(c["ci_sweep"] and min(c["ci_sweep"]) >= 1, "--ci-sweep needs positive channel counts")
    _require(c["bits"], "--bits must not be empty")
    for kw, ka in c["bits"]:
        _check_bits(kw, "--bits KW")
        _check_bits(ka, "--bits KA")
    _require(c["threads"] and min(c["threads"]) >= 1, "--threads needs positive counts")
    _require(c["reps"] >= 3, f"--reps must be >= 3, got {c['reps']}")
    _require(c["kernels"] and set(c["kernels"]) <= {"naive", "blocked", "bitwise"},
             "--kernels takes naive, blocked and/or bitwise")


def _validate_speedup(c: dict) -> None:
    _require(c["kw"] >= 1 and c["ka"] >= 1, "--kw and --ka must be positive")
    _require(c["q"] >= 1, "--q must be positive")
    _require(c["L"] >= 1, "--L must be positive")
    _require(c["gamma"] >= 0 and math.isfinite(c["gamma"]), "--gamma must be finite and >= 0")


def _validate_pack(c: dict) -> None:
    _require(c["checkpoint"] is not None, "--checkpoint is required")


VALIDATORS = {"fit": _validate_fit, "train": _validate_train, "bench": _validate_bench,
              "speedup": _validate_speedup, "pack": _validate_pack}


# --- commands --------------------------------------------------------------------------

def _say(msg: str) -> None:
    print(msg, flush=True)


def _note(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load_tensor(path: str) -> np.ndarray:
    from .data_io import read_idx

    if path.endswith(".npy"):
        a = np.load(path, allow_pickle=False)
    else:
        a = read_idx(path).astype(np.float64)
    if a.ndim == 3:
        a = a[:, None]
    if a.ndim < 2:
        raise BitQuantError(f"{path}: expected a (B, C, ...) tensor, got shape {a.shape}")
    return np.asarray(a, dtype=np.float64)


def cmd_fit(c: dict, out: Path) -> int:
    from .data_io import synth_activations
    from .quantizer_core import channel_mse_report, fit_caq

    a = synth_activations(c["seed"], c["channels"], c["batch"]) if c["input"] == "synth" \
        else _load_tensor(c["input"])
    caq = fit_caq(a, c["bits"], c["mu"], c["iters"])
    glob = fit_caq(a.reshape(1, 1, -1), c["bits"], c["mu"], c["iters"])
    report = channel_mse_report(a, glob.averaged, caq)
    report_path = Path(c["report"]) if c["report"] else out / "channel_mse.csv"
    report_path.write_text(report.to_csv())
    bases = {"caq_averaged": caq.averaged.tolist(), "global": glob.averaged.tolist(),
             "channel_bases": caq.channel_bases.tolist()}
    (out / "bases.json").write_text(json.dumps(bases, indent=2) + "\n")
    pct = 100.0 * report.improved / report.channels
    _say(f"CAQ improves {report.improved}/{report.channels} channels ({pct:.1f}%)")
    _say(f"report: {report_path}")
    return EXIT_OK


def _train_data(c: dict):
    from .data_io import load_idx, synth_blobs

    if c["task"] == "synth":
        return (synth_blobs(c["data_seed"], c["n_per_class"]),
                synth_blobs(c["data_seed"] + 1, c["n_per_class"]))
    train = load_idx(c["images"], c["labels"])
    ev = load_idx(c["eval_images"], c["eval_labels"]) if c["eval_images"] else None
    if ev is not None:
        ev.meta.update(mean=train.meta["mean"], std=train.meta["std"])
    return train, ev


def cmd_train(c: dict, out: Path) -> int:
    from .data_io import save_checkpoint_file
    from .errors import NumericError
    from .tinynet import ablate, accuracy, default_opt, log_to_csv, make_cell_state, train

    ds, ev = _train_data(c)
    opt = default_opt(epochs=max(c["epochs"], 1), **({"lr": c["lr"]} if c["lr"] else {}))
    _, ch, h, _ = ds.images.shape
    state = make_cell_state(c["weights"], c["acts"], c["kw"], c["ka"], c["seed"], opt, ch, h, ds.classes)
    try:
        history = train(state, ds, c["epochs"], c["batch_size"], ev)
    except NumericError as exc:
        bad = out / "last_good.bqck"
        if getattr(exc, "last_good", None) is not None:
            bad.write_bytes(exc.last_good)
        _note(f"training diverged: {exc}")
        _note(f"state at the start of the failing epoch: {bad}")
        _note("try a lower --lr")
        return EXIT_RUNTIME
    (out / "train_log.csv").write_text(log_to_csv(history))
    save_checkpoint_file(out / "final.bqck", state)
    if history:
        acc = accuracy(state, ds.normalized(), ds.labels)
        _say(f"final train accuracy {100 * acc:.2f}% after {state.epoch} epochs")
    else:
        _say("no epochs run; wrote the initial state")
    if c["ablate"]:
        table = ablate(ds, c["ablate_weights"], c["ablate_acts"], tuple(c["ablate_seeds"]), c["epochs"],
                       c["kw"], c["ka"], opt, ev, c["batch_size"])
        (out / "ablation.csv").write_text(table.to_csv())
        (out / "ablation.md").write_text(table.to_markdown())
        _say(table.to_markdown().rstrip())
    return EXIT_OK


def cmd_bench(c: dict, out: Path) -> int:
    from .bitkernel.bench import BenchConfig, bench_matmul, records_to_csv

    cfg = BenchConfig(n=c["n"], m=c["m"], kernel_size=c["kernel_size"], c_i_sweep=tuple(c["ci_sweep"]),
                      bits=tuple(tuple(b) for b in c["bits"]), threads=tuple(c["threads"]), reps=c["reps"],
                      seed=c["seed"], word_bits=c["word_bits"], kernels=tuple(c["kernels"]))
    records = bench_matmul(cfg, log=_note)
    path = Path(c["csv"]) if c["csv"] else out / "bench.csv"
    path.write_text(records_to_csv(records))
    _say(f"timings: {path}")
    return EXIT_OK


def cmd_speedup(c: dict, out: Path) -> int:
    from .bitkernel import SpeedupParams, speedup_asymptote, theoretical_speedup

    sp = SpeedupParams(c["kw"], c["ka"], c["q"], c["L"], c["gamma"])
    s, asym = theoretical_speedup(sp), speedup_asymptote(sp)
    if c["gamma"] == 0:
        _note("warning: gamma = 0 makes the float baseline free; the speedup degenerates to 0")
    _say(f"S = {s:.4f}")
    _say(f"asymptote gamma*L/(2*Kw*Ka) = {asym:.4f} (~{asym:.0f}x for large q)")
    (out / "speedup.json").write_text(json.dumps({"speedup": s, "asymptote": asym}) + "\n")
    return EXIT_OK


PACK_CHECKS = 16
PACK_RTOL = 1e-4


def cmd_pack(c: dict, out: Path) -> int:
    from .data_io import load_checkpoint_file, load_packed, save_packed
    from .errors import VerificationError
    from .tinynet import export_packed, forward

    state = load_checkpoint_file(c["checkpoint"])
    layers = export_packed(state, c["word_bits"])
    if not layers:
        raise BitQuantError("nothing to pack: the checkpoint has no layer with quantized weights and inputs")
    blob = save_packed(layers)
    reloaded = load_packed(blob)
    rng = np.random.default_rng(c["seed"])
    x = rng.standard_normal((PACK_CHECKS,) + tuple(state.input_shape))
    dense = forward(state, x)[0]
    packed = forward(state, x, packed=reloaded)[0]
    dev = float(np.max(np.abs(packed - dense)) / max(float(np.max(np.abs(dense))), 1e-12))
    if not dev <= PACK_RTOL:
        raise VerificationError(f"packed inference deviates from dense by {dev:.3g}; nothing written")
    path = out / c["name"]
    path.write_bytes(blob)
    _say(f"packed {len(layers)} layer(s) to {path}; verification deviation {dev:.3g}")
    return EXIT_OK


HANDLERS = {"fit": cmd_fit, "train": cmd_train, "bench": cmd_bench, "speedup": cmd_speedup, "pack": cmd_pack}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on parse errors
    try:
        cfg = resolve(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _note(f"bitquant {args.command}: error: {exc}")
        return EXIT_USAGE
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        echo = {"command": args.command, "version": __version__, "config": cfg}
        (out / "run.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
        return HANDLERS[args.command](cfg, out)
    except (BitQuantError, OSError) as exc:
        _note(f"bitquant {args.command}: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
