import numpy as np
import pytest

from tsdsae import autodiff as ad
from tsdsae.autodiff import ContractError, Tensor
from tsdsae.distributions import DiagGaussian, kl_diag_gaussians
from tsdsae.gradcheck import small_model_config
from tsdsae.model import encode, encode_global, group_of, init_params, transition_prior_rollout
from tsdsae.objective import (GlobalPriorSpec, compute_loss, kl_global_term, kl_local_term, reconstruction_term,
                              swap_regularisers, total_loss)
from tsdsae.rng import Rng


def gauss(m, lv):
    return DiagGaussian(Tensor(np.asarray(m, float)), Tensor(np.asarray(lv, float)))


def scalar(t):
    return float(t.data)


# -- ELBO terms ------------------------------------------------------------

def test_reconstruction_term():
    x = Rng(0).normal((2, 5, 3))
    assert scalar(reconstruction_term(gauss(x, np.zeros_like(x)), Tensor(x))) == 0.0
    ones = np.ones((1, 4, 2))
    assert scalar(reconstruction_term(gauss(ones, 0 * ones), Tensor(0 * ones))) == -1.0
    mu = Rng(1).normal(x.shape)
    expected = -0.5 / 5 * np.sum((x - mu) ** 2) / 2
    assert abs(scalar(reconstruction_term(gauss(mu, 0 * mu), Tensor(x))) - expected) <= 1e-12


def test_kl_local_term():
    r = Rng(2)
    m, lv = r.normal((2, 3, 4)), r.normal((2, 3, 4))
    assert abs(scalar(kl_local_term(gauss(m, lv), gauss(m, lv)))) <= 1e-12
    assert scalar(kl_local_term(gauss(np.ones((1, 1, 1)), np.zeros((1, 1, 1))), gauss(np.zeros((1, 1, 1)), np.zeros((1, 1, 1))))) == 0.5
    pm, plv = r.normal((2, 3, 4)), r.normal((2, 3, 4))
    per_frame = [scalar(kl_diag_gaussians(gauss(m[b, t], lv[b, t]), gauss(pm[b, t], plv[b, t])))
                 for b in range(2) for t in range(3)]
    assert abs(scalar(kl_local_term(gauss(m, lv), gauss(pm, plv))) - np.mean(per_frame)) <= 1e-12


def test_kl_global_term_cases():
    z16 = np.zeros((3, 16))
    assert scalar(kl_global_term(gauss(z16, z16), GlobalPriorSpec())) == 0.0
    assert abs(scalar(kl_global_term(gauss(z16 + 1, z16), GlobalPriorSpec())) - 8.0) <= 1e-12
    cfg = small_model_config()
    params = init_params(cfg, Rng(0))
    x = Tensor(Rng(1).uniform((3, cfg.seq_len, cfg.d_input)))
    snap = {k: p.data.copy() for k, p in params.items() if group_of(k) == "global_encoder"}
    q_v = encode_global(params, x, cfg)
    assert abs(scalar(kl_global_term(q_v, GlobalPriorSpec("informed", snap), x, cfg))) <= 1e-12
    with pytest.raises(ContractError):
        GlobalPriorSpec("informed", None)


def test_informed_prior_is_a_constant_target():
    cfg = small_model_config()
    params = init_params(cfg, Rng(0))
    x = Tensor(Rng(1).uniform((3, cfg.seq_len, cfg.d_input)))
    snap = {k: Tensor(p.data + 0.1, requires_grad=True) for k, p in params.items() if group_of(k) == "global_encoder"}
    spec = GlobalPriorSpec("informed", {k: t.data for k, t in snap.items()})
    loss = kl_global_term(encode_global(params, x, cfg), spec, x, cfg)
    ad.backward(loss, list(params.values()))
    assert all(t.grad is None for t in snap.values())
    assert any(np.abs(params[k].grad).max() > 0 for k in snap)


# -- total loss ------------------------------------------------------------

def test_total_loss_stage_contract():
    r, kg, kl = Tensor(-2.0), Tensor(0.25), Tensor(0.5)
    sw = tuple(Tensor(v) for v in (0.1, 0.2, 0.3, 0.4))
    c = total_loss("constrained", r, kg, kl, sw).as_floats()
    assert c["kl_local"] == 0.0 and c["swap_gv"] == c["swap_lz"] == 0.0 and c["total"] == 2.25
    zero = Tensor(0.0)
    assert total_loss("informed", r, zero, zero, (zero,) * 4).as_floats()["total"] == 2.0
    f = total_loss("informed", r, kg, kl, sw).as_floats()
    assert abs(f["total"] - (-f["recon"] + f["kl_local"] + f["kl_global"] + sum(f[k] for k in
               ("swap_gv", "swap_gz", "swap_lv", "swap_lz")))) <= 1e-15
    with pytest.raises(ContractError):
        total_loss("bogus", r, kg)


# -- swap regularisers -----------------------------------------------------

def _np_fcn(P, prefix, h, n):
    for k in range(n):
        h = np.tanh(h @ P[f"{prefix}.fc{k}.w"] + P[f"{prefix}.fc{k}.b"])
    return h


def _np_encoder(P, prefix, h, n, pool):
    h = _np_fcn(P, prefix, h, n)
    if pool:
        h = h.mean(axis=1)
    return h @ P[f"{prefix}.gauss.mean.w"] + P[f"{prefix}.gauss.mean.b"], \
        h @ P[f"{prefix}.gauss.logvar.w"] + P[f"{prefix}.gauss.logvar.b"]


def _np_kl(mq, lq, mp, lp):
    return np.sum(0.5 * (lp - lq) + (np.exp(lq) + (mq - mp) ** 2) / (2 * np.exp(lp)) - 0.5, axis=-1)


def _straight_line_swaps(P, cfg, x, pairing, noise):
    """Step-by-step re-implementation of the swap scheme for the factorised model."""
    n = len(cfg.enc_widths)
    B, T, _ = x.shape

    def infer(seq):
        mv, lv = _np_encoder(P, "global_encoder", seq, n, pool=True)
        mz, lz = _np_encoder(P, "local_encoder", seq, n, pool=False)
        v = mv + np.exp(0.5 * lv) * noise.normal(mv.shape)
        z = mz + np.exp(0.5 * lz) * noise.normal(mz.shape)
        return (mv, lv, v), (mz, lz, z)

    def dec(z, v):
        inp = np.concatenate([z, np.repeat(v[:, None, :], T, axis=1)], axis=-1)
        return _np_fcn(P, "decoder", inp, n) @ P["decoder.gauss.mean.w"] + P["decoder.gauss.mean.b"]

    (mv, lv, v), (mz, lz, z) = infer(x)
    results = []
    gsw, lsw = dec(z, v[pairing]), dec(z[pairing], v)
    (gmv, glv, _), (gmz, glz, _) = infer(gsw)
    (lmv, llv, _), (lmz, llz, _) = infer(lsw)
    results.append(np.mean(_np_kl(gmv, glv, mv[pairing], lv[pairing])))
    results.append(np.mean(_np_kl(gmz, glz, mz, lz)))
    results.append(np.mean(_np_kl(lmv, llv, mv, lv)))
    results.append(np.mean(_np_kl(lmz, llz, mz[pairing], lz[pairing])))
    return results


def test_swap_terms_match_straight_line_oracle():
    cfg = small_model_config()
    params = init_params(cfg, Rng(0))
    for p in params.values():
        p.data = p.data + 0.2 * Rng(6).normal(p.shape)
    x = Rng(1).uniform((2, cfg.seq_len, cfg.d_input))
    pairing = np.array([1, 0])
    rng = Rng(42)
    q_v, v, q_z, z = encode(params, Tensor(x), cfg, rng)
    got = [scalar(t) for t in swap_regularisers(params, cfg, Tensor(x), q_v, v, q_z, z, pairing, rng)]
    P = {k: p.data for k, p in params.items()}
    want = _straight_line_swaps(P, cfg, x, pairing, Rng(42))
    assert np.allclose(got, want, rtol=0, atol=1e-10)


def test_swap_terms_nonnegative_and_pairing_checked():
    cfg = small_model_config(inference_mode="full", decoder_mode="enriched")
    params = init_params(cfg, Rng(3))
    x = Tensor(Rng(4).uniform((4, cfg.seq_len, cfg.d_input)))
    rng = Rng(5)
    q_v, v, q_z, z = encode(params, x, cfg, rng)
    terms = swap_regularisers(params, cfg, x, q_v, v, q_z, z, rng.derangement(4), rng)
    assert all(scalar(t) >= -1e-9 for t in terms)
    with pytest.raises(ContractError):
        swap_regularisers(params, cfg, x, q_v, v, q_z, z, np.array([0, 2, 3, 1]), rng)
    with pytest.raises(ContractError):
        swap_regularisers(params, cfg, x, q_v, v, q_z, z, np.array([1, 1, 3, 2]), rng)


def test_self_swap_with_perfect_decoder_gives_zero():
    # one sequence paired with itself, zero-noise latents, and a decoder
    # whose output is its bias: a time-constant input it reproduces exactly
    cfg = small_model_config()
    params = init_params(cfg, Rng(0))
    for k in params:
        if k.startswith("decoder.fc") or k == "decoder.gauss.mean.w":
            params[k].data = np.zeros_like(params[k].data)
    frame = Rng(3).uniform(cfg.d_input)
    params["decoder.gauss.mean.b"].data = frame.copy()
    x = Tensor(np.repeat(frame[None, None, :], cfg.seq_len, axis=1))
    q_v, _, q_z, _ = encode(params, x, cfg, Rng(2))
    terms = swap_regularisers(params, cfg, x, q_v, q_v.mean, q_z, q_z.mean, np.array([0]), Rng(4))
    assert all(abs(scalar(t)) <= 1e-12 for t in terms)


def test_swap_targets_receive_no_gradient_but_swap_branch_does():
    cfg = small_model_config()
    params = init_params(cfg, Rng(0))
    x = Tensor(Rng(1).uniform((3, cfg.seq_len, cfg.d_input)))
    rng = Rng(2)
    q_v, v, q_z, z = encode(params, x, cfg, rng)
    # targets built from separate leaf tensors that require grad
    tv = DiagGaussian(Tensor(q_v.mean.data.copy(), requires_grad=True), Tensor(q_v.logvar.data.copy(), requires_grad=True))
    tz = DiagGaussian(Tensor(q_z.mean.data.copy(), requires_grad=True), Tensor(q_z.logvar.data.copy(), requires_grad=True))
    gv, gz, lv, lz = swap_regularisers(params, cfg, x, q_v, v, q_z, z, np.array([1, 2, 0]), rng,
                                       targets=(tv.detach(), tz.detach()))
    ad.backward(ad.add(ad.add(gv, gz), ad.add(lv, lz)), list(params.values()))
    assert all(t.grad is None for t in (tv.mean, tv.logvar, tz.mean, tz.logvar))
    assert np.abs(params["decoder.fc0.w"].grad).max() > 0


def test_default_swap_targets_are_detached():
    # gradients with default targets equal those with explicit frozen copies
    cfg = small_model_config()
    x = Tensor(Rng(1).uniform((3, cfg.seq_len, cfg.d_input)))
    pairing = np.array([1, 2, 0])

    def grads(explicit):
        params = init_params(cfg, Rng(0))
        q_v, v, q_z, z = encode(params, x, cfg, Rng(2))
        targets = (DiagGaussian(Tensor(q_v.mean.data.copy()), Tensor(q_v.logvar.data.copy())),
                   DiagGaussian(Tensor(q_z.mean.data.copy()), Tensor(q_z.logvar.data.copy()))) if explicit else None
        terms = swap_regularisers(params, cfg, x, q_v, v, q_z, z, pairing, Rng(9), targets)
        ad.backward(ad.add(ad.add(terms[0], terms[1]), ad.add(terms[2], terms[3])), list(params.values()))
        return {k: p.grad for k, p in params.items()}

    a, b = grads(False), grads(True)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_stage1_loss_ignores_transition():
    cfg = small_model_config()
    params = init_params(cfg, Rng(0))
    x = Tensor(Rng(1).uniform((3, cfg.seq_len, cfg.d_input)))
    br = compute_loss(params, cfg, x, Rng(2), "constrained", GlobalPriorSpec())
    ad.backward(br.total, list(params.values()))
    for k, p in params.items():
        if group_of(k) == "transition":
            assert not np.any(p.grad), k
    assert br.as_floats()["kl_local"] == 0.0


def test_informed_stage_starts_at_zero_global_kl():
    cfg = small_model_config()
    params = init_params(cfg, Rng(0))
    x = Tensor(Rng(1).uniform((3, cfg.seq_len, cfg.d_input)))
    snap = {k: p.data.copy() for k, p in params.items() if group_of(k) == "global_encoder"}
    br = compute_loss(params, cfg, x, Rng(2), "informed", GlobalPriorSpec("informed", snap), True)
    f = br.as_floats()
    assert abs(f["kl_global"]) <= 1e-12
    assert all(f[k] >= -1e-9 for k in ("kl_local", "swap_gv", "swap_gz", "swap_lv", "swap_lz"))
    prior = transition_prior_rollout(params, encode(params, x, cfg, Rng(2))[3], cfg)
    assert prior.mean.shape == (3, cfg.seq_len, cfg.l_z)
