import numpy as np
import pytest

from tsdsae import autodiff as ad
from tsdsae.autodiff import ContractError, DimensionError, Tensor
from tsdsae.gradcheck import small_model_config
from tsdsae.model import (LstmState, ModelConfig, decode, encode_global, encode_local, forward, group_of,
                          init_params, lstm_cell_step, param_shapes, to_batch, transition_prior_rollout)
from tsdsae.objective import GlobalPriorSpec, compute_loss
from tsdsae.rng import Rng


@pytest.fixture(params=[("factorised", "factorised"), ("full", "factorised"), ("factorised", "enriched")],
                ids=["fact", "fullq", "enriched"])
def setup(request):
    inf, dec = request.param
    cfg = small_model_config(inference_mode=inf, decoder_mode=dec)
    params = init_params(cfg, Rng(4))
    x = Tensor(Rng(5).uniform((3, cfg.seq_len, cfg.d_input)))
    return cfg, params, x


def test_param_names_follow_config():
    cfg = ModelConfig()
    params = init_params(cfg, Rng(0))
    assert set(params) == set(param_shapes(cfg))
    assert {group_of(k) for k in params} == {"global_encoder", "local_encoder", "transition", "decoder"}
    full = param_shapes(ModelConfig(inference_mode="full", decoder_mode="enriched"))
    assert "local_encoder.l1.bwd.w_hh" in full and "decoder.ctx.fwd.w_ih" in full
    assert "decoder.gauss.logvar.w" not in full


def test_init_is_seeded():
    cfg = small_model_config()
    a, b, c = init_params(cfg, Rng(1)), init_params(cfg, Rng(1)), init_params(cfg, Rng(2))
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a)


def test_config_validation():
    with pytest.raises(ValueError, match="inference_mode"):
        ModelConfig(inference_mode="bogus")
    with pytest.raises(ValueError, match="l_v"):
        ModelConfig(l_v=0)
    with pytest.raises(ValueError, match="input_scale"):
        ModelConfig(input_scale=0.0)


def test_lstm_cell_zero_case_and_determinism():
    params = {"c.w_ih": Tensor(np.zeros((3, 8))), "c.w_hh": Tensor(np.zeros((2, 8))), "c.b": Tensor(np.zeros(8))}
    out, st = lstm_cell_step(params, "c", Tensor(np.ones((1, 3))), LstmState(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2)))))
    assert np.array_equal(out.data, np.zeros((1, 2))) and np.array_equal(st.c.data, np.zeros((1, 2)))
    r = Rng(3)
    p = {"c.w_ih": Tensor(r.normal((3, 8))), "c.w_hh": Tensor(r.normal((2, 8))), "c.b": Tensor(r.normal(8))}
    x, s = Tensor(r.normal((2, 3))), LstmState(Tensor(r.normal((2, 2))), Tensor(r.normal((2, 2))))
    assert lstm_cell_step(p, "c", x, s)[0].data.tobytes() == lstm_cell_step(p, "c", x, s)[0].data.tobytes()


def test_global_encoder_time_permutation_invariant(setup):
    cfg, params, x = setup
    perm = Rng(8).permutation(cfg.seq_len)
    a = encode_global(params, x, cfg)
    b = encode_global(params, Tensor(x.data[:, perm]), cfg)
    assert a.mean.shape == (3, cfg.l_v)
    assert np.allclose(a.mean.data, b.mean.data, rtol=0, atol=1e-14)
    assert np.allclose(a.logvar.data, b.logvar.data, rtol=0, atol=1e-14)


def test_width_mismatch_raises(setup):
    cfg, params, _ = setup
    with pytest.raises(DimensionError):
        encode_global(params, Tensor(np.zeros((2, cfg.seq_len, cfg.d_input + 1))), cfg)


def test_factorised_local_encoder_is_per_frame():
    cfg = small_model_config()
    params = init_params(cfg, Rng(0))
    x = Rng(1).uniform((2, cfg.seq_len, cfg.d_input))
    base = encode_local(params, Tensor(x), cfg).mean.data
    assert base.shape == (2, cfg.seq_len, cfg.l_z)
    y = x.copy()
    y[:, 2] += 0.5
    moved = encode_local(params, Tensor(y), cfg).mean.data
    changed = np.any(moved != base, axis=(0, 2))
    assert changed.tolist() == [t == 2 for t in range(cfg.seq_len)]


def test_full_q_depends_on_v_and_needs_it():
    cfg = small_model_config(inference_mode="full")
    params = init_params(cfg, Rng(0))
    x = Tensor(Rng(1).uniform((2, cfg.seq_len, cfg.d_input)))
    with pytest.raises(ContractError):
        encode_local(params, x, cfg)
    v = Tensor(Rng(2).normal((2, cfg.l_v)), requires_grad=True)
    q = encode_local(params, x, cfg, v)
    ad.backward(ad.sum(q.mean))
    assert np.abs(v.grad).max() > 1e-6
    # bidirectional: the first frame sees the last one
    y = x.data.copy()
    y[:, -1] += 0.5
    assert np.any(encode_local(params, Tensor(y), cfg, v.detach()).mean.data[:, 0] != q.mean.data[:, 0])


def test_transition_prior_is_causal_and_starts_standard():
    cfg = small_model_config()
    params = init_params(cfg, Rng(0))
    for p in params.values():
        p.data = p.data + 0.3 * Rng(9).normal(p.shape)
    z = Rng(1).normal((2, cfg.seq_len, cfg.l_z))
    base = transition_prior_rollout(params, Tensor(z), cfg)
    assert base.mean.shape == z.shape
    assert np.all(base.mean.data[:, 0] == 0) and np.all(base.logvar.data[:, 0] == 0)
    for t in range(cfg.seq_len):
        w = z.copy()
        w[:, t:] += 1.0
        moved = transition_prior_rollout(params, Tensor(w), cfg)
        assert np.array_equal(moved.mean.data[:, : t + 1], base.mean.data[:, : t + 1])
        if t + 1 < cfg.seq_len:
            assert np.any(moved.mean.data[:, t + 1] != base.mean.data[:, t + 1])


def test_factorised_decoder_locality_and_enriched_context():
    r = Rng(3)
    for mode, local in (("factorised", True), ("enriched", False)):
        cfg = small_model_config(decoder_mode=mode)
        params = init_params(cfg, Rng(0))
        z, v = r.normal((2, cfg.seq_len, cfg.l_z)), Tensor(r.normal((2, cfg.l_v)))
        base = decode(params, Tensor(z), v, cfg).mean.data
        w = z.copy()
        w[:, 1] += 1.0
        diff = np.any(decode(params, Tensor(w), v, cfg).mean.data != base, axis=(0, 2))
        if local:
            assert diff.tolist() == [t == 1 for t in range(cfg.seq_len)]
        else:
            assert diff.all()


def test_decoder_mode_must_match_params():
    cfg = small_model_config()
    enriched = small_model_config(decoder_mode="enriched")
    params = init_params(enriched, Rng(0))
    with pytest.raises(ContractError):
        decode(params, Tensor(np.zeros((1, cfg.seq_len, cfg.l_z))), Tensor(np.zeros((1, cfg.l_v))), cfg)


def test_forward_is_bit_deterministic(setup):
    cfg, params, x = setup
    a = forward(params, x, Rng(11), cfg)
    b = forward(params, x, Rng(11), cfg)
    for t1, t2 in [(a.v_sample, b.v_sample), (a.z_samples, b.z_samples), (a.recon.mean, b.recon.mean), (a.prior_z.mean, b.prior_z.mean)]:
        assert t1.data.tobytes() == t2.data.tobytes()


def test_stage2_gradients_reach_every_parameter(setup):
    cfg, params, x = setup
    snap = {k: p.data.copy() for k, p in params.items() if k.startswith("global_encoder")}
    br = compute_loss(params, cfg, x, Rng(0), "informed", GlobalPriorSpec("informed", snap), True, np.array([1, 2, 0]))
    ad.backward(br.total, list(params.values()))
    for k, p in params.items():
        assert np.all(np.isfinite(p.grad)), k
        assert np.abs(p.grad).max() > 0, k


def test_recon_gradient_flows_with_frozen_local_path():
    cfg = small_model_config()
    params = init_params(cfg, Rng(0))
    for k, p in params.items():
        p.requires_grad = group_of(k) not in ("local_encoder", "transition")
    br = compute_loss(params, cfg, Tensor(Rng(1).uniform((3, cfg.seq_len, cfg.d_input))), Rng(2),
                      "constrained", GlobalPriorSpec())
    ad.backward(ad.negate(br.recon))
    for k, p in params.items():
        if group_of(k) in ("decoder", "global_encoder"):
            assert np.abs(p.grad).max() > 0, k
        else:
            assert p.grad is None, k


def test_to_batch_layout_and_scale():
    x = np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4)  # [B, D, T]
    t = to_batch(x, 10.0)
    assert t.shape == (2, 4, 3) and t.data[1, 2, 0] == 10.0 * x[1, 0, 2]
