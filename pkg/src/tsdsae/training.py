"""Single-stage and two-stage training schedules, early stopping, checkpoints.

Variants:
  dsae            one stage, full ELBO with the N(0, I) global prior
  dsae_f          constrained stage, then full ELBO with the global encoder frozen
  ts_dsae_noregs  constrained stage, then full ELBO with the informed prior
  ts_dsae         as ts_dsae_noregs plus the four swap regularisers
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ContractError, Tensor
from .model import GROUPS, ModelConfig, group_of, init_params, param_shapes, to_batch
from .objective import GlobalPriorSpec, LossBreakdown, compute_loss
from .rng import Rng

log = logging.getLogger(__name__)

VARIANTS = ("dsae", "dsae_f", "ts_dsae_noregs", "ts_dsae")
LOG_HEADER = "epoch,stage,split,recon,kl_local,kl_global,swap_gv,swap_gz,swap_lv,swap_lz,total"
COMPONENTS = ("recon", "kl_local", "kl_global", "swap_gv", "swap_gz", "swap_lv", "swap_lz", "total")
CKPT_FORMAT = "TSDSAE-CKPT-1"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    def __init__(self, msg: str, location: str):
        super().__init__(f"{location}: {msg}")
        self.location = location


@dataclass
class TrainConfig:
    variant: str = "ts_dsae"
    c_epochs: int = 60
    max_epochs: int = 600
    patience: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.variant not in VARIANTS:
            raise ValueError(f"TrainConfig.variant must be one of {VARIANTS}")
        if self.patience < 1:
            raise ValueError("TrainConfig.patience must be >= 1")
        if self.batch_size < 2:
            raise ValueError("TrainConfig.batch_size must be >= 2")
        if self.two_stage and not 0 < self.c_epochs < self.max_epochs:
            raise ValueError("TrainConfig.c_epochs must lie in (0, max_epochs) for two-stage variants")

    @property
    def two_stage(self) -> bool:
        return self.variant != "dsae"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


@dataclass(frozen=True)
class Snapshot:
    params: dict  # name -> read-only ndarray
    epoch: int

    @classmethod
    def capture(cls, params: dict[str, Tensor], epoch: int) -> "Snapshot":
        frozen = {}
        for k, p in params.items():
            if group_of(k) == "global_encoder":
                a = p.data.copy()
                a.flags.writeable = False
                frozen[k] = a
        return cls(frozen, epoch)


@dataclass
class TrainState:
    config: TrainConfig
    params: dict[str, Tensor]
    adam: Adam
    rng: Rng
    epoch: int = 0
    snapshot: Snapshot | None = None
    best_val: float = math.inf
    since_improvement: int = 0
    best_params: dict | None = None
    best_epoch: int = 0
    stopped: bool = False

    @property
    def stage(self) -> int:
        """1 during constrained training, 2 afterwards (always 2 for dsae)."""
        if self.config.two_stage and self.epoch < self.config.c_epochs:
            return 1
        return 2


def init_model(config: ModelConfig, rng: Rng) -> dict[str, Tensor]:
    return init_params(config, rng)


def new_state(config: TrainConfig) -> TrainState:
    rng = Rng(config.seed)
    params = init_model(config.model, rng)
    adam = Adam(params, config.lr, config.beta1, config.beta2)
    return TrainState(config, params, adam, rng)


# ---------------------------------------------------------------------------
# stage plumbing

def stage_setup(state: TrainState) -> tuple[str, GlobalPriorSpec, bool, frozenset]:
    """(loss stage, global prior, swaps on?, frozen groups) for the next epoch."""
    cfg = state.config
    if state.stage == 1:
        return "constrained", GlobalPriorSpec(), False, frozenset({"local_encoder", "transition"})
    if cfg.variant == "dsae":
        return "standard", GlobalPriorSpec(), False, frozenset()
    if cfg.variant == "dsae_f":
        return "standard", GlobalPriorSpec(), False, frozenset({"global_encoder"})
    prior = GlobalPriorSpec("informed", state.snapshot.params)
    return "informed", prior, cfg.variant == "ts_dsae", frozenset()


def snapshot_global_encoder(state: TrainState) -> Snapshot:
    if state.snapshot is not None:
        raise ContractError("the global encoder snapshot has already been taken")
    state.snapshot = Snapshot.capture(state.params, state.epoch)
    return state.snapshot


def _means(rows: list[dict], weights: list[int]) -> dict[str, float]:
    w = np.asarray(weights, dtype=np.float64)
    return {k: float(np.dot([r[k] for r in rows], w) / w.sum()) for k in COMPONENTS}


def run_epoch(state: TrainState, data: np.ndarray, frozen=frozenset(), stage: str | None = None,
              prior: GlobalPriorSpec | None = None, swaps: bool = False) -> dict[str, float]:
    """One pass over ``data`` [N, D, T] in seeded shuffled mini-batches.

    Frozen groups are excluded from differentiation and from the Adam update,
    so their values and moments stay untouched.
    """
    if len(data) == 0:
        raise ContractError("run_epoch: empty dataset")
    if not set(frozen) <= set(GROUPS):
        raise ContractError(f"unknown parameter groups {set(frozen) - set(GROUPS)}")
    if stage is None:
        stage, prior, swaps, frozen = stage_setup(state)
    cfg = state.config
    trainable = [k for k in state.params if group_of(k) not in frozen]
    for k, p in state.params.items():
        p.requires_grad = k in trainable
    order = state.rng.permutation(len(data))
    rows, sizes = [], []
    try:
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            x = to_batch(data[idx], cfg.model.input_scale)
            br = compute_loss(state.params, cfg.model, x, state.rng, stage, prior, use_swaps=swaps)
            total = float(br.total.data)
            if not math.isfinite(total):
                raise TrainingError(f"non-finite loss at epoch {state.epoch + 1}, batch {b}")
            for k in trainable:
                state.params[k].grad = None
            if trainable:
                ad.backward(br.total, [state.params[k] for k in trainable])
                state.adam.step(trainable)
            rows.append(br.as_floats())
            sizes.append(len(idx))
    finally:
        for p in state.params.values():
            p.requires_grad = True
            p.grad = None
    return _means(rows, sizes)


def evaluate_objective(state: TrainState, data: np.ndarray, setup=None, batch_size: int = 128) -> dict[str, float]:
    """Stage loss on held-out data with a fixed noise stream and no updates."""
    stage, prior, swaps, _ = setup or stage_setup(state)
    rng = Rng(state.config.seed + 0x5EED)
    for p in state.params.values():
        p.requires_grad = False
    try:
        rows, sizes = [], []
        for start in range(0, len(data), batch_size):
            chunk = data[start : start + batch_size]
            if len(chunk) < 2:
                continue
            x = to_batch(chunk, state.config.model.input_scale)
            br = compute_loss(state.params, state.config.model, x, rng, stage, prior, swaps)
            rows.append(br.as_floats())
            sizes.append(len(chunk))
    finally:
        for p in state.params.values():
            p.requires_grad = True
    return _means(rows, sizes)


def early_stop_check(state: TrainState, val_objective: float) -> str:
    """Track the best (lowest) objective; 'stop' after ``patience`` epochs without strict improvement."""
    if not math.isfinite(val_objective):
        raise TrainingError(f"validation objective is {val_objective} at epoch {state.epoch}")
    if val_objective < state.best_val:
        state.best_val = val_objective
        state.since_improvement = 0
        state.best_params = {k: p.data.copy() for k, p in state.params.items()}
        state.best_epoch = state.epoch
    else:
        state.since_improvement += 1
    return "stop" if state.since_improvement >= state.config.patience else "continue"


def format_log_row(epoch: int, stage: int, split: str, comps: dict[str, float]) -> str:
    return ",".join([str(epoch), str(stage), split] + [repr(comps[k]) for k in COMPONENTS])


def train_step_epoch(state: TrainState, train: np.ndarray, val: np.ndarray) -> list[str]:
    """Advance one epoch, including the stage switch and early-stop bookkeeping.

    Early stopping only watches the final stage; the validation objective is
    the loss of the stage the epoch was trained in.
    """
    cfg = state.config
    stage_no = state.stage
    setup = stage_setup(state)
    stage, prior, swaps, frozen = setup
    comps = run_epoch(state, train, frozen, stage, prior, swaps)
    state.epoch += 1
    vc = evaluate_objective(state, val, setup)
    rows = [format_log_row(state.epoch, stage_no, "train", comps),
            format_log_row(state.epoch, stage_no, "val", vc)]
    if cfg.two_stage and state.epoch == cfg.c_epochs:
        snapshot_global_encoder(state)
    if stage_no == 2 and early_stop_check(state, vc["total"]) == "stop":
        state.stopped = True
    if state.epoch >= cfg.max_epochs:
        state.stopped = True
    return rows


def train(config: TrainConfig, train_data: np.ndarray, val_data: np.ndarray,
          state: TrainState | None = None,
          on_epoch: Callable[[TrainState, list[str]], None] | None = None) -> tuple[TrainState, list[str]]:
    """Run (or resume) training until early stop or ``max_epochs``; returns (state, log rows)."""
    if len(train_data) == 0 or len(val_data) == 0:
        raise ContractError("training needs non-empty train and validation sets")
    state = state or new_state(config)
    rows: list[str] = []
    while not state.stopped:
        new = train_step_epoch(state, train_data, val_data)
        rows.extend(new)
        if on_epoch is not None:
            on_epoch(state, new)
        if state.epoch % 25 == 0:
            log.info("epoch %d %s", state.epoch, new[-1])
    return state, rows


def train_two_stage(config: TrainConfig, train_data, val_data, **kw):
    if not config.two_stage:
        raise ContractError("train_two_stage needs a two-stage variant")
    return train(config, train_data, val_data, **kw)


def final_params(state: TrainState, which: str = "best") -> dict[str, Tensor]:
    """Parameters for evaluation: best validation epoch if any, else current."""
    if which == "best" and state.best_params is not None:
        return {k: Tensor(v.copy()) for k, v in state.best_params.items()}
    return {k: Tensor(p.data.copy()) for k, p in state.params.items()}


# ---------------------------------------------------------------------------
# checkpoints: canonical JSON with 17-significant-digit floats

def _dump(obj, out: list[str]) -> None:
    if isinstance(obj, dict):
        out.append("{")
        for n, k in enumerate(sorted(obj)):
            if n:
                out.append(",")
            out.append(json.dumps(k) + ":")
            _dump(obj[k], out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for n, v in enumerate(obj):
            if n:
                out.append(",")
            _dump(v, out)
        out.append("]")
    elif isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        out.append(json.dumps(obj))
    elif isinstance(obj, float):
        if not math.isfinite(obj):
            out.append(json.dumps(repr(obj)))
        else:
            out.append("%.17g" % obj)
    else:
        raise TypeError(f"cannot serialise {type(obj)}")


def _tensor_entry(name: str, a: np.ndarray) -> dict:
    return {"name": name, "shape": list(a.shape), "values": [float(v) for v in a.ravel()]}


def state_to_document(state: TrainState) -> dict:
    doc = {
        "format": CKPT_FORMAT,
        "train_config": state.config.to_dict(),
        "model_config": state.config.model.to_dict(),
        "epoch": state.epoch,
        "stage": state.stage,
        "best_val": state.best_val,
        "best_epoch": state.best_epoch,
        "since_improvement": state.since_improvement,
        "stopped": state.stopped,
        "rng_state": state.rng.get_state(),
        "rng_seed": state.rng.seed,
        "adam": {
            "t": state.adam.t,
            "steps": dict(state.adam.steps),
            "m": [_tensor_entry(k, state.adam.m[k]) for k in sorted(state.adam.m)],
            "v": [_tensor_entry(k, state.adam.v[k]) for k in sorted(state.adam.v)],
        },
        "params": [_tensor_entry(k, state.params[k].data) for k in sorted(state.params)],
        "snapshot": None,
        "best_params": None,
    }
    if state.snapshot is not None:
        doc["snapshot"] = {
            "epoch": state.snapshot.epoch,
            "params": [_tensor_entry(k, state.snapshot.params[k]) for k in sorted(state.snapshot.params)],
        }
    if state.best_params is not None:
        doc["best_params"] = [_tensor_entry(k, state.best_params[k]) for k in sorted(state.best_params)]
    return doc


def checkpoint_text(state: TrainState) -> str:
    out: list[str] = []
    _dump(state_to_document(state), out)
    return "".join(out) + "\n"


def save_checkpoint(state: TrainState, path) -> None:
    Path(path).write_text(checkpoint_text(state), encoding="utf-8")


def _field(doc, key, loc):
    if not isinstance(doc, dict) or key not in doc:
        raise CheckpointError(f"missing field {key!r}", loc)
    return doc[key]


def _read_tensors(entries, shapes: dict, loc: str) -> dict[str, np.ndarray]:
    if not isinstance(entries, list):
        raise CheckpointError("expected a list of tensors", loc)
    out = {}
    for n, e in enumerate(entries):
        eloc = f"{loc}[{n}]"
        name = _field(e, "name", eloc)
        shape = tuple(_field(e, "shape", eloc))
        values = _field(e, "values", eloc)
        if name not in shapes:
            raise CheckpointError(f"unexpected tensor {name!r}", eloc)
        if shape != tuple(shapes[name]):
            raise CheckpointError(f"tensor {name!r} has shape {shape}, config implies {shapes[name]}", eloc)
        try:
            arr = np.array(values, dtype=np.float64)
        except (TypeError, ValueError):
            raise CheckpointError(f"non-numeric values in {name!r}", eloc + ".values") from None
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"{arr.size} values for shape {shape}", eloc + ".values")
        out[name] = arr.reshape(shape)
    missing = set(shapes) - set(out)
    if missing:
        raise CheckpointError(f"missing tensors {sorted(missing)}", loc)
    return out


def state_from_document(doc: dict, expect_model: ModelConfig | None = None) -> TrainState:
    if _field(doc, "format", "$") != CKPT_FORMAT:
        raise CheckpointError(f"unknown format {doc['format']!r}", "$.format")
    try:
        config = TrainConfig(**_field(doc, "train_config", "$"))
    except (TypeError, ValueError) as e:
        raise CheckpointError(str(e), "$.train_config") from None
    if expect_model is not None and config.model != expect_model:
        raise CheckpointError(
            f"model config {config.model.to_dict()} differs from expected {expect_model.to_dict()}",
            "$.model_config",
        )
    shapes = param_shapes(config.model)
    params = {k: Tensor(v, requires_grad=True, name=k)
              for k, v in _read_tensors(_field(doc, "params", "$"), shapes, "$.params").items()}
    adam_doc = _field(doc, "adam", "$")
    adam = Adam(params, config.lr, config.beta1, config.beta2)
    adam.t = int(_field(adam_doc, "t", "$.adam"))
    adam.m = _read_tensors(_field(adam_doc, "m", "$.adam"), shapes, "$.adam.m")
    adam.v = _read_tensors(_field(adam_doc, "v", "$.adam"), shapes, "$.adam.v")
    steps = _field(adam_doc, "steps", "$.adam")
    adam.steps = {k: int(steps.get(k, 0)) for k in sorted(shapes)}
    rng = Rng(int(_field(doc, "rng_seed", "$")))
    try:
        rng.set_state(_field(doc, "rng_state", "$"))
    except ValueError as e:
        raise CheckpointError(str(e), "$.rng_state") from None
    state = TrainState(config, params, adam, rng)
    state.epoch = int(_field(doc, "epoch", "$"))
    state.best_val = float(_field(doc, "best_val", "$"))
    state.best_epoch = int(_field(doc, "best_epoch", "$"))
    state.since_improvement = int(_field(doc, "since_improvement", "$"))
    state.stopped = bool(_field(doc, "stopped", "$"))
    snap = doc.get("snapshot")
    if snap is not None:
        enc_shapes = {k: s for k, s in shapes.items() if group_of(k) == "global_encoder"}
        arrays = _read_tensors(_field(snap, "params", "$.snapshot"), enc_shapes, "$.snapshot.params")
        for a in arrays.values():
            a.flags.writeable = False
        state.snapshot = Snapshot(arrays, int(_field(snap, "epoch", "$.snapshot")))
    if doc.get("best_params") is not None:
        state.best_params = _read_tensors(doc["best_params"], shapes, "$.best_params")
    return state


def load_checkpoint(path, expect_model: ModelConfig | None = None) -> TrainState:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"malformed JSON: {e.msg}", f"line {e.lineno} column {e.colno}") from None
    return state_from_document(doc, expect_model)


def clone_state(state: TrainState) -> TrainState:
    return state_from_document(json.loads(checkpoint_text(state)))

