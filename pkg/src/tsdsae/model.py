"""DSAE networks: global/local encoders, transition prior and decoders.

Parameters live in one flat ``dict[str, Tensor]``. Names are
``<group>.<layer>.<tensor>`` where group is one of ``global_encoder``,
``local_encoder``, ``transition`` or ``decoder``; training freezes whole
groups.

Layout conventions: a batch of sequences is [B, T, D]; per-frame latents are
[B, T, L]; the global latent is [B, L_v].
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .distributions import DiagGaussian, sample_reparam

GROUPS = ("global_encoder", "local_encoder", "transition", "decoder")
INFERENCE_MODES = ("factorised", "full")
DECODER_MODES = ("factorised", "enriched")


@dataclass
class ModelConfig:
    d_input: int = 32
    seq_len: int = 24
    l_v: int = 16
    l_z: int = 32
    enc_widths: tuple[int, ...] = (64, 64)
    trans_widths: tuple[int, ...] = (32, 32)
    birnn_width: int = 64
    inference_mode: str = "factorised"
    decoder_mode: str = "factorised"
    # sequences are multiplied by this before entering the networks; with a
    # unit-variance decoder it acts as a fixed observation std of 1/input_scale
    input_scale: float = 30.0

    def __post_init__(self):
        self.input_scale = float(self.input_scale)
        if not self.input_scale > 0:
            raise ValueError("ModelConfig.input_scale must be > 0")
        self.enc_widths = tuple(int(w) for w in self.enc_widths)
        self.trans_widths = tuple(int(w) for w in self.trans_widths)
        for name in ("d_input", "seq_len", "l_v", "l_z", "birnn_width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if not self.enc_widths or not self.trans_widths or min(self.enc_widths + self.trans_widths) < 1:
            raise ValueError("ModelConfig widths must be non-empty and >= 1")
        if self.inference_mode not in INFERENCE_MODES:
            raise ValueError(f"ModelConfig.inference_mode must be one of {INFERENCE_MODES}")
        if self.decoder_mode not in DECODER_MODES:
            raise ValueError(f"ModelConfig.decoder_mode must be one of {DECODER_MODES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_widths"] = list(self.enc_widths)
        d["trans_widths"] = list(self.trans_widths)
        return d


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


@dataclass
class ForwardPass:
    q_v: DiagGaussian
    v_sample: Tensor
    q_z: DiagGaussian
    z_samples: Tensor
    prior_z: DiagGaussian | None
    recon: DiagGaussian


# ---------------------------------------------------------------------------
# parameter layout

def _fcn_shapes(prefix, d_in, widths):
    shapes = {}
    for k, w in enumerate(widths):
        shapes[f"{prefix}.fc{k}.w"] = (d_in, w)
        shapes[f"{prefix}.fc{k}.b"] = (w,)
        d_in = w
    return shapes, d_in


def _gauss_shapes(prefix, d_in, d_out, with_logvar=True):
    shapes = {f"{prefix}.mean.w": (d_in, d_out), f"{prefix}.mean.b": (d_out,)}
    if with_logvar:
        shapes[f"{prefix}.logvar.w"] = (d_in, d_out)
        shapes[f"{prefix}.logvar.b"] = (d_out,)
    return shapes


def _lstm_shapes(prefix, d_in, width):
    return {
        f"{prefix}.w_ih": (d_in, 4 * width),
        f"{prefix}.w_hh": (width, 4 * width),
        f"{prefix}.b": (4 * width,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter implied by ``cfg``."""
    s: dict[str, tuple[int, ...]] = {}
    fc, h = _fcn_shapes("global_encoder", cfg.d_input, cfg.enc_widths)
    s.update(fc)
    s.update(_gauss_shapes("global_encoder.gauss", h, cfg.l_v))

    if cfg.inference_mode == "factorised":
        fc, h = _fcn_shapes("local_encoder", cfg.d_input, cfg.enc_widths)
        s.update(fc)
    else:
        w = cfg.birnn_width
        s.update(_lstm_shapes("local_encoder.l0.fwd", cfg.d_input + cfg.l_v, w))
        s.update(_lstm_shapes("local_encoder.l0.bwd", cfg.d_input + cfg.l_v, w))
        s.update(_lstm_shapes("local_encoder.l1.fwd", 2 * w, w))
        s.update(_lstm_shapes("local_encoder.l1.bwd", 2 * w, w))
        h = w
    s.update(_gauss_shapes("local_encoder.gauss", h, cfg.l_z))

    d_in = cfg.l_z
    for k, w in enumerate(cfg.trans_widths):
        s.update(_lstm_shapes(f"transition.l{k}", d_in, w))
        d_in = w
    s.update(_gauss_shapes("transition.gauss", d_in, cfg.l_z))

    if cfg.decoder_mode == "enriched":
        w = cfg.birnn_width
        s.update(_lstm_shapes("decoder.ctx.fwd", cfg.l_z, w))
        s.update(_lstm_shapes("decoder.ctx.bwd", cfg.l_z, w))
        dec_in = 2 * w + cfg.l_v
    else:
        dec_in = cfg.l_z + cfg.l_v
    fc, h = _fcn_shapes("decoder", dec_in, cfg.enc_widths)
    s.update(fc)
    s.update(_gauss_shapes("decoder.gauss", h, cfg.d_input, with_logvar=False))
    return s


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


def init_params(cfg: ModelConfig, rng) -> dict[str, Tensor]:
    """Glorot-uniform matrices, zero biases, LSTM forget-gate bias 1.0.

    Tensors are drawn in sorted-name order so the result depends only on
    (cfg, generator state).
    """
    shapes = param_shapes(cfg)
    params = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = (2.0 * rng.uniform(shape) - 1.0) * bound
        else:
            data = np.zeros(shape)
            if name.endswith(".b") and _is_lstm_bias(name, shapes):
                width = shape[0] // 4
                data[width : 2 * width] = 1.0
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def _is_lstm_bias(name, shapes):
    return name[: -len(".b")] + ".w_hh" in shapes


# ---------------------------------------------------------------------------
# building blocks

def linear(params, prefix, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, params[prefix + ".w"]), params[prefix + ".b"])


def fcn(params, prefix, x: Tensor, n_layers: int) -> Tensor:
    for k in range(n_layers):
        x = ad.tanh(linear(params, f"{prefix}.fc{k}", x))
    return x


def gauss_layer(params, prefix, h: Tensor) -> DiagGaussian:
    return DiagGaussian(linear(params, prefix + ".mean", h), linear(params, prefix + ".logvar", h))


def lstm_cell_step(params, prefix, x: Tensor, state: LstmState) -> tuple[Tensor, LstmState]:
    """One LSTM step; returns (output, new state) with output == new h."""
    w_ih, w_hh = params[prefix + ".w_ih"], params[prefix + ".w_hh"]
    if x.shape[-1] != w_ih.shape[0] or state.h.shape[-1] != w_hh.shape[0]:
        raise DimensionError(f"lstm {prefix}: input {x.shape} / state {state.h.shape} mismatch")
    gates = ad.add(ad.add(ad.matmul(x, w_ih), ad.matmul(state.h, w_hh)), params[prefix + ".b"])
    H = state.c.shape[-1]
    hc = ad.lstm_pointwise(gates, state.c)
    h = ad.slice(hc, -1, 0, H)
    return h, LstmState(h, ad.slice(hc, -1, H, 2 * H))


def lstm_sequence(params, prefix, x: Tensor, reverse: bool = False) -> Tensor:
    """Run an LSTM over [B, T, d] from zero state; returns hidden states [B, T, H]."""
    # input projection for all frames at once, recurrence as one fused node
    xw = ad.add(ad.matmul(x, params[prefix + ".w_ih"]), params[prefix + ".b"])
    return ad.lstm_layer(xw, params[prefix + ".w_hh"], reverse)


def broadcast_time(v: Tensor, T: int) -> Tensor:
    B, L = v.shape
    return ad.broadcast_to(ad.reshape(v, (B, 1, L)), (B, T, L))


# ---------------------------------------------------------------------------
# networks

def _check_input(cfg: ModelConfig, x: Tensor):
    if x.ndim != 3 or x.shape[-1] != cfg.d_input:
        raise DimensionError(f"expected input [B, T, {cfg.d_input}], got {x.shape}")


def encode_global(params, x: Tensor, cfg: ModelConfig) -> DiagGaussian:
    """Per-frame FCN, average over time, Gaussian head."""
    _check_input(cfg, x)
    h = fcn(params, "global_encoder", x, len(cfg.enc_widths))
    return gauss_layer(params, "global_encoder.gauss", ad.mean(h, axis=1))


def encode_local(params, x: Tensor, cfg: ModelConfig, v: Tensor | None = None) -> DiagGaussian:
    _check_input(cfg, x)
    if cfg.inference_mode == "factorised":
        h = fcn(params, "local_encoder", x, len(cfg.enc_widths))
        return gauss_layer(params, "local_encoder.gauss", h)
    if v is None:
        raise ContractError("full inference mode needs the global latent v")
    if v.shape != (x.shape[0], cfg.l_v):
        raise DimensionError(f"v must be [B, {cfg.l_v}], got {v.shape}")
    inp = ad.concat([x, broadcast_time(v, x.shape[1])], axis=-1)
    f0 = lstm_sequence(params, "local_encoder.l0.fwd", inp)
    b0 = lstm_sequence(params, "local_encoder.l0.bwd", inp, reverse=True)
    mid = ad.concat([f0, b0], axis=-1)
    f1 = lstm_sequence(params, "local_encoder.l1.fwd", mid)
    b1 = lstm_sequence(params, "local_encoder.l1.bwd", mid, reverse=True)
    # forward and backward states averaged per frame
    h = ad.mul(ad.add(f1, b1), 0.5)
    return gauss_layer(params, "local_encoder.gauss", h)


def transition_prior_rollout(params, z: Tensor, cfg: ModelConfig) -> DiagGaussian:
    """p(z_t | z_<t) for every frame, teacher-forced on ``z``; p(z_1) = N(0, I)."""
    B, T, L = z.shape
    if L != cfg.l_z:
        raise DimensionError(f"z has {L} dims, config says {cfg.l_z}")
    first = Tensor(np.zeros((B, 1, L)))
    if T == 1:
        return DiagGaussian(first, Tensor(np.zeros((B, 1, L))))
    h = ad.getitem(z, (np.s_[:], np.s_[: T - 1]))
    for k in range(len(cfg.trans_widths)):
        h = lstm_sequence(params, f"transition.l{k}", h)
    g = gauss_layer(params, "transition.gauss", h)
    return DiagGaussian(
        ad.concat([first, g.mean], axis=1),
        ad.concat([Tensor(np.zeros((B, 1, L))), g.logvar], axis=1),
    )


def decode(params, z: Tensor, v: Tensor, cfg: ModelConfig) -> DiagGaussian:
    """Unit-variance Gaussian over frames; logvar is identically zero."""
    B, T, L = z.shape
    if L != cfg.l_z or v.shape != (B, cfg.l_v):
        raise DimensionError(f"decode: z {z.shape}, v {v.shape} do not fit the config")
    if cfg.decoder_mode == "enriched":
        if "decoder.ctx.fwd.w_hh" not in params:
            raise ContractError("enriched decoder requested but parameters lack decoder.ctx")
        ctx = ad.concat(
            [lstm_sequence(params, "decoder.ctx.fwd", z), lstm_sequence(params, "decoder.ctx.bwd", z, reverse=True)],
            axis=-1,
        )
        inp = ad.concat([ctx, broadcast_time(v, T)], axis=-1)
    else:
        if "decoder.ctx.fwd.w_hh" in params:
            raise ContractError("factorised decoder requested but parameters carry decoder.ctx")
        inp = ad.concat([z, broadcast_time(v, T)], axis=-1)
    h = fcn(params, "decoder", inp, len(cfg.enc_widths))
    mean = linear(params, "decoder.gauss.mean", h)
    return DiagGaussian(mean, Tensor(np.zeros(mean.shape)))


def encode(params, x: Tensor, cfg: ModelConfig, rng) -> tuple[DiagGaussian, Tensor, DiagGaussian, Tensor]:
    """Infer and sample both latents: (q_v, v, q_z, z)."""
    q_v = encode_global(params, x, cfg)
    v = sample_reparam(q_v, rng)
    q_z = encode_local(params, x, cfg, v)
    z = sample_reparam(q_z, rng)
    return q_v, v, q_z, z


def forward(params, x: Tensor, rng, cfg: ModelConfig, with_prior: bool = True) -> ForwardPass:
    q_v, v, q_z, z = encode(params, x, cfg, rng)
    prior = transition_prior_rollout(params, z, cfg) if with_prior else None
    return ForwardPass(q_v, v, q_z, z, prior, decode(params, z, v, cfg))


def to_batch(x: np.ndarray, scale: float = 1.0) -> Tensor:
    """[B, T, D] model-space tensor from sequences stored as [B, D, T]."""
    arr = np.swapaxes(np.asarray(x, dtype=np.float64), 1, 2)
    return Tensor(np.ascontiguousarray(arr * scale if scale != 1.0 else arr))
