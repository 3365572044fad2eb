"""Command-line entry point: ``tsdsae <command> --config <file>``.

Commands: gen-data, train, eval, swap, grad-check. Every hyperparameter and
seed lives in the config file (YAML or JSON); flags only name paths or
indices. Relative paths in the config resolve against the config file's
directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import gradcheck
from .autodiff import ContractError
from .evaluation import DSAEAdapter, report_csv, run_evaluation_suite
from .model import ModelConfig
from .rng import Rng
from .synthdata import (Dataset, DatasetFormatError, FactorSpec, SequenceRecord, generate_dataset,
                        read_dataset, write_dataset)
from .training import (LOG_HEADER, CheckpointError, TrainConfig, TrainingError, checkpoint_text,
                       clone_state, load_checkpoint, new_state, train_step_epoch)

log = logging.getLogger("tsdsae")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, field_path: str, msg: str):
        super().__init__(f"{field_path}: {msg}")
        self.field = field_path


# ---------------------------------------------------------------------------
# experiment configuration

@dataclass
class DataConfig:
    spec: FactorSpec = field(default_factory=FactorSpec)
    n_sequences: int = 640
    seed: int = 100
    noise: bool = True


@dataclass
class PathConfig:
    train: str = "data/train.dseq"
    val: str = "data/val.dseq"
    out_dir: str = "runs/default"


@dataclass
class EvalConfig:
    seed: int = 0
    rpa_tol: int = 1
    noise: bool = True


@dataclass
class RunConfig:
    checkpoint_every: int = 10


@dataclass
class GradcheckConfig:
    trials: int = 50
    seed: int = 0
    op_tol: float = 1e-4
    e2e_tol: float = 1e-3


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    base_dir: Path = field(default=Path("."), metadata={"internal": True})

    def path(self, which: str) -> Path:
        p = Path(getattr(self.paths, which))
        return p if p.is_absolute() else (self.base_dir / p).resolve()

    def to_dict(self) -> dict:
        return {f.name: _as_plain(getattr(self, f.name)) for f in dataclasses.fields(self)
                if not f.metadata.get("internal")}


def _as_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _as_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(where, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(where, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        # YAML reads "1e-3" (no dot) as a string
        if isinstance(value, bool):
            raise ConfigError(where, f"expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(where, f"expected a number, got {value!r}") from None
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(where, f"expected a string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(where, f"expected a list, got {value!r}")
        (inner, _) = typing.get_args(tp)
        return tuple(_coerce(v, inner, f"{where}[{i}]") for i, v in enumerate(value))
    raise ConfigError(where, f"unsupported field type {tp}")


def _build(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(where or "$", f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    for key in data:
        if key not in known:
            raise ConfigError(f"{where}.{key}" if where else str(key), "unknown key")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ValueError as e:
        # dataclass validators name the offending field as "Class.field"
        msg = str(e)
        name = msg.split(" ", 1)[0].split(".")[-1] if "." in msg.split(" ", 1)[0] else ""
        raise ConfigError(f"{where}.{name}" if where and name else (where or name or "$"), msg) from None


def parse_config(doc: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, doc, "")
    cfg.base_dir = Path(base_dir).resolve()
    if cfg.run.checkpoint_every < 1:
        raise ConfigError("run.checkpoint_every", "must be >= 1")
    if cfg.data.n_sequences < 10:
        raise ConfigError("data.n_sequences", "must be >= 10")
    spec, model = cfg.data.spec, cfg.train.model
    if (spec.d_bins, spec.seq_len) != (model.d_input, model.seq_len):
        raise ConfigError("train.model.d_input",
                          f"model expects D={model.d_input}, T={model.seq_len}; "
                          f"data has D={spec.d_bins}, T={spec.seq_len}")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError("$", f"cannot parse {path}: {e}") from None
    return parse_config(doc, path.parent)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: ExperimentConfig) -> int:
    train, val = generate_dataset(cfg.data.spec, cfg.data.n_sequences, cfg.data.seed, cfg.data.noise)
    files = {}
    for ds, which in ((train, "train"), (val, "val")):
        p = cfg.path(which)
        p.parent.mkdir(parents=True, exist_ok=True)
        write_dataset(ds, p)
        files[which] = {"path": p.name, "records": len(ds), "crc32": zlib.crc32(p.read_bytes())}
    provenance = {"seed": cfg.data.seed, "n_sequences": cfg.data.n_sequences, "noise": cfg.data.noise,
                  "spec": cfg.data.spec.to_dict(), "files": files}
    side = cfg.path("train").parent / "provenance.json"
    side.write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("wrote %d train / %d val sequences", len(train), len(val))
    return EXIT_OK


def _load_split(cfg: ExperimentConfig, which: str) -> Dataset:
    p = cfg.path(which)
    if not p.exists():
        raise FileNotFoundError(f"dataset file {p} does not exist (run gen-data first)")
    ds = read_dataset(p, which)
    D, T = ds.records[0].x.shape
    m = cfg.train.model
    if (D, T) != (m.d_input, m.seq_len):
        raise ConfigError("train.model.d_input", f"{p} holds D={D}, T={T}; model expects D={m.d_input}, T={m.seq_len}")
    return ds


def _run_files(out: Path) -> dict[str, Path]:
    return {"log": out / "log.csv", "ckpt": out / "checkpoint.json",
            "final": out / "final.json", "best": out / "best.json"}


def _best_state_text(state) -> str:
    best = clone_state(state)
    if state.best_params is not None:
        for k, a in state.best_params.items():
            best.params[k].data = a.copy()
    return checkpoint_text(best)


def cmd_train(cfg: ExperimentConfig, resume: bool = False, stop_after: int | None = None) -> int:
    """Train the configured variant; ``stop_after`` ends the process early (as an interruption would)."""
    train_x = _load_split(cfg, "train").stacked()
    val_x = _load_split(cfg, "val").stacked()
    out = cfg.path("out_dir")
    out.mkdir(parents=True, exist_ok=True)
    files = _run_files(out)

    if resume and files["ckpt"].exists():
        state = load_checkpoint(files["ckpt"], expect_model=cfg.train.model)
        if state.config != cfg.train:
            raise CheckpointError("training config differs from the config file", "$.train_config")
        lines = files["log"].read_text(encoding="utf-8").splitlines() if files["log"].exists() else []
        kept = [LOG_HEADER] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= state.epoch]
        files["log"].write_text("\n".join(kept) + "\n", encoding="utf-8")
        log.info("resuming at epoch %d", state.epoch)
    else:
        state = new_state(cfg.train)
        files["log"].write_text(LOG_HEADER + "\n", encoding="utf-8")

    with files["log"].open("a", encoding="utf-8") as fh:
        while not state.stopped:
            rows = train_step_epoch(state, train_x, val_x)
            fh.write("\n".join(rows) + "\n")
            fh.flush()
            if state.epoch % cfg.run.checkpoint_every == 0 or state.stopped:
                files["ckpt"].write_text(checkpoint_text(state), encoding="utf-8")
            if stop_after is not None and state.epoch >= stop_after and not state.stopped:
                files["ckpt"].write_text(checkpoint_text(state), encoding="utf-8")
                log.info("stopping early at epoch %d as requested", state.epoch)
                return EXIT_OK
    files["final"].write_text(checkpoint_text(state), encoding="utf-8")
    files["best"].write_text(_best_state_text(state), encoding="utf-8")
    log.info("finished at epoch %d (best %d)", state.epoch, state.best_epoch)
    return EXIT_OK


def _adapter(cfg: ExperimentConfig, checkpoint) -> DSAEAdapter:
    path = Path(checkpoint) if checkpoint else _run_files(cfg.path("out_dir"))["best"]
    state = load_checkpoint(path, expect_model=cfg.train.model)
    return DSAEAdapter(state.params, cfg.train.model, noise=cfg.eval.noise)


def cmd_eval(cfg: ExperimentConfig, checkpoint=None, out=None) -> int:
    model = _adapter(cfg, checkpoint)
    res = run_evaluation_suite(model, _load_split(cfg, "train"), _load_split(cfg, "val"), cfg.eval.seed,
                               cfg.data.spec.octave_offset, cfg.eval.rpa_tol)
    dest = Path(out) if out else cfg.path("out_dir") / "report.csv"
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text(report_csv(res["rows"]), encoding="utf-8")
    for metric, factor, value in res["rows"]:
        log.info("%s[%s] = %.4f", metric, factor, value)
    return EXIT_OK


SWAP_FILES = ("x_i", "x_j", "recon_i", "global_swap", "local_swap")


def cmd_swap(cfg: ExperimentConfig, i: int, j: int, out, checkpoint=None, split: str = "val") -> int:
    """Export x^i, x^j, the reconstruction of i, x^{v:i->j} (z^i with v^j) and x^{z:i->j} (v^i with z^j)."""
    ds = _load_split(cfg, split)
    n = len(ds)
    for name, k in (("i", i), ("j", j)):
        if not 0 <= k < n:
            raise ContractError(f"swap index {name}={k} outside [0, {n})")
    model = _adapter(cfg, checkpoint)
    x = ds.stacked()[[i, j]]
    v, z = model.encode_sample(x, Rng(cfg.eval.seed))
    outputs = {
        "x_i": (x[0], ds.records[i]),
        "x_j": (x[1], ds.records[j]),
        "recon_i": (model.decode(z[:1], v[:1])[0], ds.records[i]),
        "global_swap": (model.decode(z[:1], v[1:])[0], ds.records[j]),
        "local_swap": (model.decode(z[1:], v[:1])[0], ds.records[i]),
    }
    dest = Path(out)
    dest.mkdir(parents=True, exist_ok=True)
    for name, (arr, rec) in outputs.items():
        # labels follow the sequence that supplies the global latent
        one = Dataset([SequenceRecord(arr.astype(np.float32), rec.instrument, rec.octave)],
                      split, None, None, ds.n_factors)
        write_dataset(one, dest / f"{name}.dseq")
    return EXIT_OK


def cmd_gradcheck(cfg: ExperimentConfig) -> int:
    g = cfg.gradcheck
    ok, lines = gradcheck.run_suite(g.trials, g.seed, g.op_tol, g.e2e_tol)
    for ln in lines:
        print(ln)
    print("grad-check:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tsdsae", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "eval", "swap", "grad-check"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML or JSON experiment config")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from <out_dir>/checkpoint.json")
            p.add_argument("--stop-after", type=int, default=None, metavar="EPOCH",
                           help="checkpoint and exit after this epoch")
        if name in ("eval", "swap"):
            p.add_argument("--checkpoint", default=None, help="default: <out_dir>/best.json")
            p.add_argument("--out", default=None, required=name == "swap")
        if name == "swap":
            p.add_argument("--i", type=int, required=True)
            p.add_argument("--j", type=int, required=True)
            p.add_argument("--split", choices=("train", "val"), default="val")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.resume, args.stop_after)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.out)
        if args.command == "swap":
            return cmd_swap(cfg, args.i, args.j, args.out, args.checkpoint, args.split)
        return cmd_gradcheck(cfg)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, DatasetFormatError, ContractError, TrainingError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
