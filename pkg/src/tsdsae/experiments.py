"""Desk-scale experiment runs shared by scripts/ and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .autodiff import Tensor
from .evaluation import DSAEAdapter, run_evaluation_suite
from .model import ModelConfig, encode_global, group_of, to_batch
from .synthdata import FactorSpec, generate_dataset
from .training import TrainConfig, TrainState, final_params, new_state, train

DATA_SEED_BASE = 100


@dataclass(frozen=True)
class RunSpec:
    variant: str = "ts_dsae"
    seed: int = 0
    l_z: int = 32
    decoder_mode: str = "factorised"
    inference_mode: str = "factorised"
    octaves: int = 1
    n_sequences: int = 640
    c_epochs: int = 60
    max_epochs: int = 200
    patience: int = 60
    input_scale: float = ModelConfig.input_scale

    def label(self) -> str:
        return (f"{self.variant}/lz{self.l_z}/{self.decoder_mode}/oct{self.octaves}/seed{self.seed}")

    def configs(self) -> tuple[FactorSpec, TrainConfig]:
        spec = FactorSpec(octaves=self.octaves)
        model = ModelConfig(d_input=spec.d_bins, seq_len=spec.seq_len, l_z=self.l_z,
                            decoder_mode=self.decoder_mode, inference_mode=self.inference_mode,
                            input_scale=self.input_scale)
        tc = TrainConfig(variant=self.variant, c_epochs=self.c_epochs, max_epochs=self.max_epochs,
                         patience=self.patience, seed=self.seed, model=model)
        return spec, tc


@dataclass
class InvariantProbe:
    """Watches the two-stage contract on every epoch of a run."""

    frozen_init: dict = field(default_factory=dict, repr=False)
    snapshot_bytes: dict | None = field(default=None, repr=False)
    prior_bytes: bytes | None = field(default=None, repr=False)
    probe_x: np.ndarray | None = field(default=None, repr=False)
    violations: list[str] = field(default_factory=list)
    stage1_epochs: int = 0
    stage2_epochs: int = 0

    def start(self, state: TrainState, val: np.ndarray) -> None:
        self.frozen_init = {k: p.data.tobytes() for k, p in state.params.items()
                            if group_of(k) in ("local_encoder", "transition")}
        self.probe_x = val[:4]

    def _prior(self, state: TrainState) -> bytes:
        snap = {k: Tensor(a) for k, a in state.snapshot.params.items()}
        cfg = state.config.model
        return encode_global(snap, to_batch(self.probe_x, cfg.input_scale), cfg).mean.data.tobytes()

    def __call__(self, state: TrainState, rows: list[str]) -> None:
        if not state.config.two_stage:
            return
        stage = int(rows[0].split(",")[1])
        if stage == 1:
            self.stage1_epochs += 1
            now = {k: state.params[k].data.tobytes() for k in self.frozen_init}
            if now != self.frozen_init:
                self.violations.append(f"epoch {state.epoch}: frozen parameters moved")
            if any(float(v) != 0.0 for v in rows[0].split(",")[4:5] + rows[0].split(",")[6:10]):
                self.violations.append(f"epoch {state.epoch}: stage-1 log has non-zero kl_local/swap terms")
        else:
            self.stage2_epochs += 1
        if state.snapshot is None:
            return
        current = {k: a.tobytes() for k, a in state.snapshot.params.items()}
        if self.snapshot_bytes is None:
            self.snapshot_bytes = current
            self.prior_bytes = self._prior(state)
            live = {k: state.params[k].data.tobytes() for k in current}
            if live != current:
                self.violations.append("snapshot differs from live parameters at capture")
        elif current != self.snapshot_bytes or self._prior(state) != self.prior_bytes:
            self.violations.append(f"epoch {state.epoch}: snapshot or informed prior changed")


@dataclass
class RunResult:
    spec: RunSpec
    metrics: dict  # (metric, factor) -> value
    seconds: float
    epochs: int
    best_epoch: int
    probe: InvariantProbe
    log_rows: list[str]

    def get(self, metric: str, factor: str = "instrument") -> float:
        return self.metrics[(metric, factor)]

    def min_post(self, factor: str = "instrument") -> float:
        return min(self.get("f1_post_global", factor), self.get("f1_post_local", factor))


def run_one(spec: RunSpec, on_epoch: Callable | None = None) -> RunResult:
    """Generate data, train, and evaluate the best-validation parameters."""
    fspec, tc = spec.configs()
    train_ds, val_ds = generate_dataset(fspec, spec.n_sequences, DATA_SEED_BASE + spec.seed)
    tx, vx = train_ds.stacked(), val_ds.stacked()
    probe = InvariantProbe()
    t0 = time.perf_counter()
    state = new_state(tc)
    probe.start(state, vx)

    def hook(st, rows):
        probe(st, rows)
        if on_epoch is not None:
            on_epoch(st, rows)

    state, rows = train(tc, tx, vx, state=state, on_epoch=hook)
    model = DSAEAdapter(final_params(state, "best"), tc.model)
    res = run_evaluation_suite(model, train_ds, val_ds, eval_seed=0, octave_offset=fspec.octave_offset)
    metrics = {(m, f): v for m, f, v in res["rows"]}
    return RunResult(spec, metrics, time.perf_counter() - t0, state.epoch, state.best_epoch, probe, rows)


def with_(spec: RunSpec, **kw) -> RunSpec:
    return replace(spec, **kw)
