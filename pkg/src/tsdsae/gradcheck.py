"""Central finite-difference checks for every differentiable operation.

Each registered case builds random inputs, reduces the op output to a scalar
through a fixed random projection, and compares the analytic gradient of every
input with central differences (step ``h``) elementwise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import DiagGaussian, kl_diag_gaussians, log_prob, sample_reparam
from .model import LstmState, ModelConfig, encode, fcn, gauss_layer, init_params, lstm_cell_step
from .objective import GlobalPriorSpec, compute_loss
from .rng import Rng


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-4, index=None) -> np.ndarray:
    """Central differences of ``f`` with respect to ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    idxs = np.ndindex(arr.shape) if index is None else index
    for i in idxs:
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return g


@dataclass
class OpCase:
    name: str
    make_inputs: Callable[[Rng], list[np.ndarray]]
    fn: Callable[..., Tensor]


def _pos(shape):
    return lambda r: [np.abs(r.normal(shape)) + 0.5]


def _lstm_step(x, h, c, w_ih, w_hh, b):
    params = {"cell.w_ih": w_ih, "cell.w_hh": w_hh, "cell.b": b}
    out, st = lstm_cell_step(params, "cell", x, LstmState(h, c))
    return ad.concat([out, st.c], axis=-1)


def _fcn_gau(x, w0, b0, w1, b1, wm, bm, wl, bl):
    p = {"n.fc0.w": w0, "n.fc0.b": b0, "n.fc1.w": w1, "n.fc1.b": b1,
         "n.gauss.mean.w": wm, "n.gauss.mean.b": bm, "n.gauss.logvar.w": wl, "n.gauss.logvar.b": bl}
    g = gauss_layer(p, "n.gauss", fcn(p, "n", x, 2))
    return ad.concat([g.mean, g.logvar], axis=-1)


def _shapes(*shapes):
    return lambda r: [r.normal(s) for s in shapes]


_EPS_FIXED = np.array([[0.3, -1.2, 0.7], [1.5, -0.4, 0.05]])

OPS: dict[str, OpCase] = {
    c.name: c
    for c in [
        OpCase("matmul", _shapes((3, 4), (4, 2)), ad.matmul),
        OpCase("matmul_batched", _shapes((2, 3, 4), (4, 2)), ad.matmul),
        OpCase("add", _shapes((2, 3), (2, 3)), ad.add),
        OpCase("sub_broadcast", _shapes((2, 3), (1, 3)), ad.sub),
        OpCase("mul_broadcast", _shapes((2, 3, 4), (4,)), ad.mul),
        OpCase("tanh", _shapes((2, 3)), ad.tanh),
        OpCase("sigmoid", _shapes((2, 3)), ad.sigmoid),
        OpCase("exp", _shapes((2, 2)), ad.exp),
        OpCase("log", _pos((2, 3)), ad.log),
        OpCase("negate", _shapes((3,)), ad.negate),
        OpCase("square", _shapes((2, 3)), ad.square),
        OpCase("sum_axis", _shapes((3, 4)), lambda a: ad.sum(a, axis=1)),
        OpCase("sum_all", _shapes((3, 4)), lambda a: ad.sum(a)),
        OpCase("mean_time", _shapes((5, 6)), lambda a: ad.mean(a, axis=1)),
        OpCase("concat", _shapes((2, 3), (2, 2)), lambda a, b: ad.concat([a, b], axis=1)),
        OpCase("slice", _shapes((4, 5)), lambda a: ad.slice(a, 1, 1, 4)),
        OpCase("getitem", _shapes((3, 4, 2)), lambda a: a[:, 2]),
        OpCase("take", _shapes((4, 3)), lambda a: ad.take(a, [2, 0, 2, 1], axis=0)),
        OpCase("reshape", _shapes((2, 6)), lambda a: ad.reshape(a, (3, 4))),
        OpCase("broadcast_to", _shapes((2, 1, 3)), lambda a: ad.broadcast_to(a, (2, 4, 3))),
        OpCase("stack", _shapes((2, 3), (2, 3)), lambda a, b: ad.stack([a, b], axis=1)),
        OpCase("lstm_pointwise", _shapes((2, 12), (2, 3)), ad.lstm_pointwise),
        OpCase("lstm_layer", _shapes((2, 5, 12), (3, 12)), ad.lstm_layer),
        OpCase("lstm_layer_reverse", _shapes((2, 5, 12), (3, 12)), lambda x, w: ad.lstm_layer(x, w, reverse=True)),
        OpCase("lstm_cell_step", _shapes((2, 3), (2, 4), (2, 4), (3, 16), (4, 16), (16,)), _lstm_step),
        OpCase("fcn_gau", _shapes((5, 3), (3, 4), (4,), (4, 4), (4,), (4, 2), (2,), (4, 2), (2,)), _fcn_gau),
        OpCase("kl_diag_gaussians", _shapes((2, 3), (2, 3), (2, 3), (2, 3)),
               lambda mq, lq, mp, lp: kl_diag_gaussians(DiagGaussian(mq, lq), DiagGaussian(mp, lp))),
        OpCase("log_prob", _shapes((2, 3), (2, 3), (2, 3)),
               lambda m, lv, x: log_prob(DiagGaussian(m, lv), x)),
        OpCase("sample_reparam", _shapes((2, 3), (2, 3)),
               lambda m, lv: sample_reparam(DiagGaussian(m, lv), eps=_EPS_FIXED)),
    ]
}


def check_op(case: OpCase, rng: Rng, h: float = 1e-4) -> float:
    """Max elementwise relative error over all inputs for one random trial."""
    arrays = case.make_inputs(rng)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = case.fn(*tensors)
    proj = rng.normal(out.shape)
    loss = ad.sum(ad.mul(out, Tensor(proj)))
    ad.backward(loss, tensors)

    def f():
        return float(np.sum(case.fn(*[Tensor(a) for a in arrays]).data * proj))

    worst = 0.0
    for a, t in zip(arrays, tensors):
        num = numeric_grad(f, a, h)
        worst = max(worst, float(rel_error(t.grad, num).max()))
    return worst


def check_all_ops(trials: int = 50, seed: int = 0, tol: float = 1e-4, ops: dict | None = None) -> dict[str, float]:
    """Max relative error per op over ``trials`` random trials."""
    rng = Rng(seed)
    return {name: max(check_op(case, rng) for _ in range(trials)) for name, case in (ops or OPS).items()}


def small_model_config(**kw) -> ModelConfig:
    base = dict(d_input=6, seq_len=5, l_v=3, l_z=4, enc_widths=(7, 5), trans_widths=(5, 4), birnn_width=4)
    base.update(kw)
    return ModelConfig(**base)


def check_stage2_loss(cfg: ModelConfig, seed: int = 0, n_entries: int = 20, batch: int = 3,
                      h: float = 1e-4) -> float:
    """Spot-check the full informed-stage loss (with swap terms) on random entries.

    Noise is frozen by re-seeding the generator for every evaluation, and the
    pairing is fixed, so the loss is a deterministic smooth function.
    """
    rng = Rng(seed)
    params = init_params(cfg, rng)
    for p in params.values():
        p.data = p.data + 0.1 * rng.normal(p.shape)
    snap = {k: p.data + 0.05 * rng.normal(p.shape) for k, p in params.items() if k.startswith("global_encoder")}
    prior = GlobalPriorSpec("informed", snap)
    x = Tensor(rng.uniform((batch, cfg.seq_len, cfg.d_input)))
    pairing = np.roll(np.arange(batch), 1)
    noise_seed = seed + 1

    # stop-gradient targets are held at their base-point values
    q_v, _, q_z, _ = encode(params, x, cfg, Rng(noise_seed))
    targets = (q_v.detach(), q_z.detach())

    def loss_value():
        return compute_loss(params, cfg, x, Rng(noise_seed), "informed", prior, True, pairing, targets).total

    loss = loss_value()
    ad.backward(loss, list(params.values()))
    names = sorted(params)
    worst = 0.0
    for _ in range(n_entries):
        name = names[rng.below(len(names))]
        arr = params[name].data
        idx = tuple(rng.below(n) for n in arr.shape)
        num = numeric_grad(lambda: float(loss_value().data), arr, h, index=[idx])[idx]
        worst = max(worst, float(rel_error(np.array(params[name].grad[idx]), np.array(num))))
    return worst


def run_suite(trials: int = 50, seed: int = 0, op_tol: float = 1e-4, e2e_tol: float = 1e-3) -> tuple[bool, list[str]]:
    """Run everything; returns (all passed, report lines)."""
    lines, ok = [], True
    for name, err in check_all_ops(trials, seed).items():
        passed = err <= op_tol
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'} op={name} max_rel_err={err:.3e} tol={op_tol:g}")
    for label, cfg in [
        ("stage2_factorised", small_model_config()),
        ("stage2_full_q", small_model_config(inference_mode="full")),
        ("stage2_enriched", small_model_config(decoder_mode="enriched")),
    ]:
        err = check_stage2_loss(cfg, seed)
        passed = err <= e2e_tol
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'} op={label} max_rel_err={err:.3e} tol={e2e_tol:g}")
    return ok, lines
