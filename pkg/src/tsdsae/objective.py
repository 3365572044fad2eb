"""Training losses: the sequence ELBO and the four latent-swap regularisers.

All quantities are batch means. Per-frame terms (reconstruction, local KL,
sequence-level z KLs of the swap terms) are averaged over time.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .distributions import DiagGaussian, kl_diag_gaussians
from .model import ModelConfig, decode, encode, encode_global, transition_prior_rollout

STAGES = ("constrained", "standard", "informed")
ZERO = Tensor(np.zeros(()))


@dataclass
class LossBreakdown:
    recon: Tensor
    kl_local: Tensor
    kl_global: Tensor
    swap_gv: Tensor
    swap_gz: Tensor
    swap_lv: Tensor
    swap_lz: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).data) for f in fields(self)}


@dataclass(frozen=True)
class GlobalPriorSpec:
    kind: str = "standard"
    snapshot: dict | None = None

    def __post_init__(self):
        if self.kind not in ("standard", "informed"):
            raise ContractError(f"unknown global prior kind {self.kind!r}")
        if self.kind == "informed" and not self.snapshot:
            raise ContractError("informed prior needs snapshot encoder parameters")


def reconstruction_term(recon: DiagGaussian, x: Tensor) -> Tensor:
    """(1/T) sum_t -0.5 ||x_t - mu_t||^2, averaged over the batch."""
    if recon.shape != x.shape:
        raise DimensionError(f"reconstruction: {recon.shape} vs data {x.shape}")
    sq = ad.sum(ad.square(ad.sub(x, recon.mean)), axis=-1)  # [B, T]
    return ad.mul(ad.mean(sq), -0.5)


def kl_local_term(q_z: DiagGaussian, prior_z: DiagGaussian) -> Tensor:
    return ad.mean(kl_diag_gaussians(q_z, prior_z))


def kl_global_term(q_v: DiagGaussian, prior: GlobalPriorSpec, x: Tensor | None = None,
                   cfg: ModelConfig | None = None) -> Tensor:
    if prior.kind == "standard":
        target = DiagGaussian.standard(q_v.shape)
    else:
        if x is None or cfg is None:
            raise ContractError("informed prior needs the input batch and config")
        # snapshot tensors are plain arrays wrapped without grad: a constant target
        snap = {k: Tensor(v) for k, v in prior.snapshot.items()}
        target = encode_global(snap, x, cfg).detach()
    return ad.mean(kl_diag_gaussians(q_v, target))


def _take(d: DiagGaussian, idx) -> DiagGaussian:
    return DiagGaussian(ad.take(d.mean, idx), ad.take(d.logvar, idx))


def swap_regularisers(params, cfg: ModelConfig, x: Tensor, q_v: DiagGaussian, v: Tensor,
                      q_z: DiagGaussian, z: Tensor, pairing, rng,
                      targets: tuple[DiagGaussian, DiagGaussian] | None = None) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Infer, replace, decode, re-infer; returns (gv, gz, lv, lz) KL batch means.

    ``pairing[i]`` is the partner j of sequence i. Swapped sequences are the
    decoder means. Target posteriors are constants: detached copies of
    ``q_v``/``q_z`` unless ``targets`` supplies them explicitly.
    """
    pairing = np.asarray(pairing, dtype=np.int64)
    B = x.shape[0]
    if pairing.shape != (B,) or sorted(pairing.tolist()) != list(range(B)):
        raise ContractError("pairing must be a permutation of the batch indices")
    if B > 1 and np.any(pairing == np.arange(B)):
        raise ContractError("pairing must not map a sequence onto itself")

    v_j, z_j = ad.take(v, pairing), ad.take(z, pairing)
    x_gswap = decode(params, z, v_j, cfg).mean  # z^i with v^j
    x_lswap = decode(params, z_j, v, cfg).mean  # z^j with v^i

    qv_g, _, qz_g, _ = encode(params, x_gswap, cfg, rng)
    qv_l, _, qz_l, _ = encode(params, x_lswap, cfg, rng)

    tq_v, tq_z = (q_v.detach(), q_z.detach()) if targets is None else targets
    gv = ad.mean(kl_diag_gaussians(qv_g, _take(tq_v, pairing)))
    gz = ad.mean(kl_diag_gaussians(qz_g, tq_z))
    lv = ad.mean(kl_diag_gaussians(qv_l, tq_v))
    lz = ad.mean(kl_diag_gaussians(qz_l, _take(tq_z, pairing)))
    return gv, gz, lv, lz


def total_loss(stage: str, recon: Tensor, kl_global: Tensor, kl_local: Tensor | None = None,
               swaps: tuple[Tensor, Tensor, Tensor, Tensor] | None = None) -> LossBreakdown:
    """Negative objective to minimise, all components unit-weighted.

    ``constrained`` keeps only reconstruction and the global KL; ``standard``
    and ``informed`` add the local KL and, when given, the swap terms.
    """
    if stage not in STAGES:
        raise ContractError(f"unknown stage {stage!r}")
    if stage == "constrained":
        kl_local, swaps = ZERO, None
    elif kl_local is None:
        raise ContractError(f"stage {stage!r} needs the local KL")
    total = ad.add(ad.negate(recon), kl_global)
    if stage != "constrained":
        total = ad.add(total, kl_local)
    if swaps is not None:
        for s in swaps:
            total = ad.add(total, s)
    else:
        swaps = (ZERO,) * 4
    return LossBreakdown(recon, kl_local, kl_global, *swaps, total)


def compute_loss(params, cfg: ModelConfig, x: Tensor, rng, stage: str, prior: GlobalPriorSpec,
                 use_swaps: bool = False, pairing=None,
                 swap_targets: tuple[DiagGaussian, DiagGaussian] | None = None) -> LossBreakdown:
    """Forward pass plus the stage's loss on one batch."""
    q_v, v, q_z, z = encode(params, x, cfg, rng)
    recon = reconstruction_term(decode(params, z, v, cfg), x)
    kl_g = kl_global_term(q_v, prior, x, cfg)
    if stage == "constrained":
        return total_loss(stage, recon, kl_g)
    kl_l = kl_local_term(q_z, transition_prior_rollout(params, z, cfg))
    swaps = None
    if use_swaps:
        if pairing is None:
            pairing = rng.derangement(x.shape[0])
        swaps = swap_regularisers(params, cfg, x, q_v, v, q_z, z, pairing, rng, swap_targets)
    return total_loss(stage, recon, kl_g, kl_l, swaps)

