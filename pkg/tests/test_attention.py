"""Attention block: layout, rotary enhancement, normalization wrap, hooks."""

import numpy as np
import pytest

from stlink import _kernels
from stlink.attention import SeAttentionBlock
from stlink.gradcheck import grad_check
from stlink.rope import rope_frequencies, temporal_angles
from stlink.tensor import Tensor, dtype_scope, tensor_sum


def _block(d_model=8, heads=1, n_nodes=2, t_in=2, dropout=0.0, mode="full", seed=0):
    return SeAttentionBlock(d_model, heads, n_nodes, t_in, dropout,
                            np.random.default_rng(seed), mode=mode)


def _rot_pairs(v, angles):
    """Independent pairwise rotation oracle: v (..., 2P), angles (P,)."""
    c, s = np.cos(angles), np.sin(angles)
    pairs = v.reshape(v.shape[:-1] + (len(angles), 2))
    out = np.empty_like(pairs)
    out[..., 0] = pairs[..., 0] * c - pairs[..., 1] * s
    out[..., 1] = pairs[..., 0] * s + pairs[..., 1] * c
    return out.reshape(v.shape)


def _layernorm_rows(x, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def test_full_block_matches_straight_line_oracle():
    with dtype_scope(np.float64):
        n, t_in, d = 2, 2, 8
        block = _block(d_model=d, heads=1, n_nodes=n, t_in=t_in, seed=3)
        rng = np.random.default_rng(10)
        h = rng.standard_normal((1, t_in * n, d))
        out = block.forward(Tensor(h), None, train_mode=False)

        # normalize per node over the flattened (time, feature) row
        gamma = block.revin.gamma.data
        beta = block.revin.beta.data
        rows = h[0]
        hn = np.empty_like(rows)
        stats = {}
        for node in range(n):
            flat = np.concatenate([rows[t * n + node] for t in range(t_in)])
            mu, var = flat.mean(), flat.var()
            stats[node] = (mu, var)
            for t in range(t_in):
                hn[t * n + node] = gamma[node] * (rows[t * n + node] - mu) / np.sqrt(var + 1e-5) + beta[node]

        q = hn @ block.w_q.data
        k = hn @ block.w_k.data
        v = hn @ block.w_v.data
        freqs = block.freqs
        qt = np.stack([_rot_pairs(q[l], (l // n) * freqs) for l in range(t_in * n)])
        kt = np.stack([_rot_pairs(k[l], (l // n) * freqs) for l in range(t_in * n)])

        def spatial(x):
            out_rows = x.copy()
            for l in range(t_in * n):
                scale = block.n_in.data[l % n]
                out_rows[l, : d // 2] = _rot_pairs(x[l, : d // 2], scale * freqs[: d // 4])
            return out_rows

        q_hat = np.concatenate([qt, spatial(q)], axis=-1) @ block.phi_wq.data[0]
        k_hat = np.concatenate([kt, spatial(k)], axis=-1) @ block.phi_wk.data[0]
        logits = q_hat @ k_hat.T / np.sqrt(d)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        weights = e / e.sum(axis=-1, keepdims=True)
        ctx = (weights @ v) @ block.w_o.data

        denorm = np.empty_like(ctx)
        for node in range(n):
            mu, var = stats[node]
            for t in range(t_in):
                l = t * n + node
                denorm[l] = (ctx[l] - beta[node]) / gamma[node] * np.sqrt(var + 1e-5) + mu
        expected = _layernorm_rows(rows + denorm)
    assert np.abs(out.data[0] - expected).max() < 1e-9


def test_zero_output_projection_reduces_to_layer_norm():
    with dtype_scope(np.float64):
        block = _block(seed=1)
        rng = np.random.default_rng(2)
        block.revin.gamma.data[:] = rng.uniform(0.5, 2.0, block.n_nodes)
        block.revin.beta.data[:] = rng.standard_normal(block.n_nodes)
        block.w_o.data[:] = 0.0
        h = rng.standard_normal((2, block.seq_len, block.d_model))
        out = block.forward(Tensor(h), None, train_mode=False)
        expected = _layernorm_rows(h)
    assert np.abs(out.data - expected).max() < 1e-9


def test_attn_identity_hook_gives_layer_norm_of_doubled_input():
    with dtype_scope(np.float64):
        block = _block(seed=4)
        rng = np.random.default_rng(5)
        block.revin.gamma.data[:] = rng.uniform(0.5, 2.0, block.n_nodes)
        block.revin.beta.data[:] = rng.standard_normal(block.n_nodes)
        h = rng.standard_normal((1, block.seq_len, block.d_model))
        out = block.forward(Tensor(h), None, train_mode=False, attn_identity=True)
        expected = _layernorm_rows(2.0 * h)
    assert np.abs(out.data - expected).max() < 1e-9


def test_identical_tokens_attend_uniformly_in_plain_mode():
    block = _block(d_model=6, heads=2, n_nodes=3, t_in=2, mode="plain", seed=6)
    row = np.random.default_rng(7).standard_normal(6).astype(np.float32)
    h = np.broadcast_to(row, (1, block.seq_len, 6)).copy()
    weights = block.attention_weights(Tensor(h))
    assert np.allclose(weights, 1.0 / block.seq_len, atol=1e-6)


def test_identical_tokens_at_one_step_attend_uniformly_in_full_mode():
    with dtype_scope(np.float64):
        block = _block(d_model=8, heads=2, n_nodes=4, t_in=1, seed=8)
        block.n_in.data[:] = 0.0
        row = np.random.default_rng(9).standard_normal(8)
        h = np.broadcast_to(row, (1, 4, 8)).copy()
        weights = block.attention_weights(Tensor(h))
    assert weights.shape == (1, 2, 4, 4)
    assert np.allclose(weights, 0.25, atol=1e-9)


def test_dominant_key_captures_attention():
    block = _block(d_model=4, heads=1, n_nodes=2, t_in=2, mode="plain", seed=10)
    eye = np.eye(4, dtype=np.float32)
    block.w_q.data[:] = eye
    block.w_k.data[:] = eye
    h = np.zeros((1, 4, 4), dtype=np.float32)
    h[0, :, 0] = 1.0
    h[0, 0, 0] = 50.0
    weights = block.attention_weights(Tensor(h))
    assert np.allclose(weights[0, 0, :, 0].astype(np.float64), 1.0, atol=1e-9)


def test_attention_rows_sum_to_one():
    block = _block(d_model=8, heads=2, n_nodes=2, t_in=3, seed=11)
    h = np.random.default_rng(12).standard_normal((2, block.seq_len, 8)).astype(np.float32)
    weights = block.attention_weights(Tensor(h))
    assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-5)


def test_temporal_shift_leaves_weights_unchanged():
    with dtype_scope(np.float64):
        block = _block(d_model=8, heads=1, n_nodes=2, t_in=3, mode="temporal_only", seed=13)
        ident = np.vstack([np.eye(8), np.eye(8)]) * 0.5
        block.phi_wq.data[:] = ident
        block.phi_wk.data[:] = ident
        h = np.random.default_rng(14).standard_normal((1, block.seq_len, 8))
        base = block.attention_weights(Tensor(h))
        t_of_token = np.arange(block.seq_len) // block.n_nodes
        block.theta_t = Tensor(temporal_angles(t_of_token + 19.5, block.freqs))
        shifted = block.attention_weights(Tensor(h))
        assert np.abs(base - shifted).max() < 1e-9
        # control: dilating the gaps is not a shift and must change the weights
        block.theta_t = Tensor(temporal_angles(t_of_token * 3.0, block.freqs))
        dilated = block.attention_weights(Tensor(h))
    assert np.abs(base - dilated).max() > 1e-3


def test_block_gradients_match_finite_differences():
    with dtype_scope(np.float64):
        block = _block(seed=15)
        rng = np.random.default_rng(16)
        h = Tensor(rng.standard_normal((1, block.seq_len, block.d_model)), requires_grad=True)
        w = Tensor(rng.standard_normal((1, block.seq_len, block.d_model)))
        params = dict(block.parameters(), h=h)
        report = grad_check(
            lambda: tensor_sum(block.forward(h, None, train_mode=False) * w),
            params, tol=1e-4,
        )
    assert report.passed, repr(report)


def test_train_mode_dropout_changes_output():
    block = _block(dropout=0.5, seed=17)
    h = Tensor(np.random.default_rng(18).standard_normal((1, block.seq_len, 8)).astype(np.float32))
    eval_out = block.forward(h, None, train_mode=False)
    train_out = block.forward(h, np.random.default_rng(19), train_mode=True)
    assert not np.allclose(eval_out.data, train_out.data, atol=1e-4)


def test_parameter_sets_per_mode():
    full = set(_block(mode="full").parameters())
    assert full == {"w_q", "w_k", "w_v", "w_o", "phi_wq", "phi_wk",
                    "n_in", "revin_gamma", "revin_beta", "ln_gamma", "ln_beta"}
    temporal = set(_block(mode="temporal_only").parameters())
    assert temporal == {"w_q", "w_k", "w_v", "w_o", "phi_wq", "phi_wk",
                        "ln_gamma", "ln_beta"}
    plain = set(_block(d_model=6, heads=2, mode="plain").parameters())
    assert plain == {"w_q", "w_k", "w_v", "w_o", "ln_gamma", "ln_beta"}


def test_constructor_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="unknown attention mode"):
        SeAttentionBlock(8, 1, 2, 2, 0.0, rng, mode="rotary")
    with pytest.raises(ValueError, match="not divisible by heads"):
        SeAttentionBlock(8, 3, 2, 2, 0.0, rng)
    with pytest.raises(ValueError, match="divisible by 4"):
        SeAttentionBlock(6, 1, 2, 2, 0.0, rng)
    assert SeAttentionBlock(6, 2, 2, 2, 0.0, rng, mode="plain").d_h == 3


def test_forward_shape_validation():
    block = _block()
    rng_in = np.random.default_rng(1)
    with pytest.raises(ValueError, match="expected \\(B, L, d_model\\)"):
        block.forward(Tensor(np.ones((4, 8), dtype=np.float32)), None, False)
    with pytest.raises(ValueError, match="sequence length 3 != T_in\\*N = 4"):
        block.forward(Tensor(rng_in.standard_normal((1, 3, 8)).astype(np.float32)), None, False)
    with pytest.raises(ValueError, match="model width 6 != d_model 8"):
        block.forward(Tensor(rng_in.standard_normal((1, 4, 6)).astype(np.float32)), None, False)


def test_phi_reduction_initialized_near_half_sum():
    block = _block(seed=20)
    base = np.vstack([np.eye(8), np.eye(8)]) * 0.5
    assert np.abs(block.phi_wq.data[0] - base).max() < 0.2
    assert block.phi_wq.data.shape == (1, 16, 8)


def test_batch_items_are_independent():
    block = _block(seed=21)
    rng = np.random.default_rng(22)
    a = rng.standard_normal((1, block.seq_len, 8)).astype(np.float32)
    b = rng.standard_normal((1, block.seq_len, 8)).astype(np.float32)
    both = np.concatenate([a, b], axis=0)
    out_pair = block.forward(Tensor(both), None, train_mode=False)
    out_a = block.forward(Tensor(a), None, train_mode=False)
    assert np.allclose(out_pair.data[0], out_a.data[0], atol=1e-6)
