"""Whole-model wiring: embedding, freeze policy, head readout, loss masking."""

import numpy as np
import pytest

from stlink.gradcheck import grad_check
from stlink.model import Model, ModelConfig, loss_mae
from stlink.tensor import GradTape, Tensor, dtype_scope, tensor_sum


def _config(**overrides):
    base = dict(n_nodes=2, f_in=1, f_out=1, t_in=2, t_out=3, d_model=8,
                n_layers=2, n_upper=1, heads=1, dropout=0.0, mem_slots=4,
                top_k_mem=2, n_experts=2, top_k_exp=1, tod_slots=12, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def _model(**overrides):
    config = _config(**overrides)
    return Model(config, np.random.default_rng(config.seed))


def _inputs(config, seed=0, batch=2):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, config.t_in, config.n_nodes, config.f_in)).astype(np.float32)
    slots = rng.integers(0, config.tod_slots, config.t_in)
    dow = rng.integers(0, 7, config.t_in)
    return x, slots, dow


def test_config_validation():
    with pytest.raises(ValueError, match=r"n_upper 3 outside \[0, 2\]"):
        _config(n_upper=3)
    with pytest.raises(ValueError, match="divisible by heads"):
        _config(d_model=10, heads=4)
    with pytest.raises(ValueError, match="head dimension must be divisible by 4"):
        _config(d_model=12, heads=2)
    with pytest.raises(ValueError, match="t_in and t_out must be at least 1"):
        _config(t_in=0)
    with pytest.raises(ValueError, match="scaler length must equal f_out"):
        _config(scaler_mean=[0.0, 0.0])
    assert _config().d_ff == 32
    assert _config(d_ff=5).d_ff == 5


def test_parameter_naming_scheme():
    names = set(_model().parameters())
    assert {"embed.conv_w", "embed.conv_b", "embed.tod_table", "embed.dow_table",
            "embed.node_table", "head.w", "head.b"} <= names
    assert "layers.0.attn.w_q" in names
    assert "layers.1.ffn.mem_values" in names
    assert "layers.1.attn.revin_gamma" in names


def test_embed_matches_per_token_loop():
    model = _model()
    c = model.config
    x, slots, dow = _inputs(c, seed=1)
    h = model.embed_input(Tensor(x), slots, dow)
    assert h.shape == (2, c.t_in * c.n_nodes, c.d_model)
    for b in range(2):
        for t in range(c.t_in):
            for node in range(c.n_nodes):
                expected = (x[b, t, node] @ model.conv_w.data + model.conv_b.data
                            + model.tod_table.data[slots[t]]
                            + model.dow_table.data[dow[t]]
                            + model.node_table.data[node])
                got = h.data[b, t * c.n_nodes + node]
                assert np.abs(got - expected).max() < 1e-6


def test_embed_accepts_per_batch_time_features():
    model = _model()
    c = model.config
    x, _slots, _dow = _inputs(c, seed=2)
    slots = np.array([[0, 1], [5, 6]])
    dow = np.array([[0, 0], [3, 3]])
    h = model.embed_input(Tensor(x), slots, dow)
    single = model.embed_input(Tensor(x[1:]), slots[1], dow[1])
    assert np.allclose(h.data[1], single.data[0], atol=1e-6)


def test_embed_validation():
    model = _model()
    c = model.config
    x, slots, dow = _inputs(c)
    with pytest.raises(ValueError, match=r"time-of-day slot outside \[0, 12\)"):
        model.embed_input(Tensor(x), np.array([0, 12]), dow)
    with pytest.raises(ValueError, match=r"day-of-week outside \[0, 7\)"):
        model.embed_input(Tensor(x), slots, np.array([0, 7]))
    with pytest.raises(ValueError, match="input shape"):
        model.embed_input(Tensor(x[:, :, :1]), slots, dow)


def test_forward_shape_and_eval_determinism():
    model = _model()
    x, slots, dow = _inputs(model.config)
    a = model.forward(Tensor(x), slots, dow)
    b = model.forward(Tensor(x), slots, dow)
    assert a.shape == (2, 3, 2, 1)
    assert np.array_equal(a.data, b.data)


def test_zero_head_predicts_the_scaler_mean():
    model = _model(scaler_mean=[5.0], scaler_std=[2.0])
    model.head_w.data[:] = 0.0
    model.head_b.data[:] = 0.0
    x, slots, dow = _inputs(model.config)
    pred = model.forward(Tensor(x), slots, dow)
    assert np.allclose(pred.data, 5.0, atol=1e-6)


def test_scaler_folding_is_affine():
    plain = _model()
    scaled = _model(scaler_mean=[3.0], scaler_std=[10.0])
    x, slots, dow = _inputs(plain.config)
    z = plain.forward(Tensor(x), slots, dow)
    y = scaled.forward(Tensor(x), slots, dow)
    assert np.allclose(y.data, z.data * 10.0 + 3.0, atol=1e-4)


def test_node_permutation_equivariance():
    with dtype_scope(np.float64):
        model = _model(n_nodes=3, seed=4)
        c = model.config
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, c.t_in, 3, 1))
        slots = np.array([1, 2])
        dow = np.array([0, 0])
        base = model.forward(Tensor(x), slots, dow)

        perm = np.array([2, 0, 1])
        model.node_table.data = model.node_table.data[perm]
        model.head_w.data = model.head_w.data[perm]
        model.head_b.data = model.head_b.data[perm]
        for attn, _ffn in model.layers:
            attn.n_in.data = attn.n_in.data[perm]
            attn.revin.gamma.data = attn.revin.gamma.data[perm]
            attn.revin.beta.data = attn.revin.beta.data[perm]
        permuted = model.forward(Tensor(x[:, :, perm]), slots, dow)
    assert np.abs(permuted.data - base.data[:, :, perm]).max() < 1e-9


def test_freeze_policy_masks():
    model = _model(n_layers=3, n_upper=1)
    mask = model.apply_freeze_policy()
    assert mask["embed.conv_w"] and mask["head.w"]
    for i in (0, 1):
        assert not mask[f"layers.{i}.attn.w_q"]
        assert not mask[f"layers.{i}.ffn.expert0_w1"]
        assert mask[f"layers.{i}.attn.ln_gamma"]
        assert mask[f"layers.{i}.ffn.ln_beta"]
    assert mask["layers.2.attn.w_q"]
    assert mask["layers.2.ffn.expert0_w1"]
    for i in range(3):
        assert not mask[f"layers.{i}.ffn.mem_keys"]


def test_freeze_policy_boundary_settings():
    model = _model(n_layers=2)
    all_frozen = model.apply_freeze_policy(0)
    assert not any(v for k, v in all_frozen.items()
                   if k.startswith("layers.") and "ln_" not in k)
    assert model.config.n_upper == 0
    all_trainable = model.apply_freeze_policy(2)
    assert all(v for k, v in all_trainable.items() if "mem_keys" not in k)
    with pytest.raises(ValueError, match=r"n_upper 5 outside \[0, 2\]"):
        model.apply_freeze_policy(5)


def test_frozen_layers_disable_ema():
    model = _model(n_layers=2, n_upper=1)
    assert not model.layers[0][1].ema_enabled
    assert model.layers[1][1].ema_enabled


def test_frozen_keys_survive_training_steps():
    model = _model(n_layers=2, n_upper=1)
    lower_keys = model.layers[0][1].memory.keys.data.copy()
    upper_keys = model.layers[1][1].memory.keys.data.copy()
    x, slots, dow = _inputs(model.config, seed=6)
    rng = np.random.default_rng(7)
    for _ in range(3):
        with GradTape() as tape:
            pred = model.forward(Tensor(x), slots, dow, rng, train_mode=True)
            tape.backward(loss_mae(pred, np.zeros_like(pred.data)))
        model.apply_key_updates()
    assert np.array_equal(model.layers[0][1].memory.keys.data, lower_keys)
    assert not np.array_equal(model.layers[1][1].memory.keys.data, upper_keys)


def test_trainable_parameters_matches_mask():
    model = _model(n_layers=2, n_upper=1)
    mask = model.apply_freeze_policy()
    trainable = model.trainable_parameters()
    assert set(trainable) == {k for k, v in mask.items() if v}


def test_init_is_seed_deterministic():
    a = _model(seed=9)
    b = _model(seed=9)
    for name, t in a.parameters().items():
        assert np.array_equal(t.data, b.parameters()[name].data), name
    c = _model(seed=10)
    assert not np.array_equal(a.conv_w.data, c.conv_w.data)


def test_non_finite_hidden_state_is_reported():
    model = _model()
    model.layers[0][1].ln_beta.data[:] = np.inf
    x, slots, dow = _inputs(model.config)
    with pytest.raises(ValueError, match="non-finite hidden state after layer 0"):
        model.forward(Tensor(x), slots, dow)


def test_training_dropout_requires_rng():
    model = _model(dropout=0.5)
    x, slots, dow = _inputs(model.config)
    with pytest.raises(ValueError, match="training forward with dropout needs an rng"):
        model.forward(Tensor(x), slots, dow, rng=None, train_mode=True)
    out = model.forward(Tensor(x), slots, dow, rng=None, train_mode=False)
    assert np.isfinite(out.data).all()


def test_slot_counts_shape_and_dense_mode():
    model = _model()
    x, slots, dow = _inputs(model.config)
    model.forward(Tensor(x), slots, dow, np.random.default_rng(0), train_mode=True)
    counts = model.slot_counts()
    assert len(counts) == 2
    assert len(counts[1]) == model.config.mem_slots
    dense = _model(ffn_mode="dense")
    assert dense.slot_counts() == [[], []]


def test_loss_mae_values_and_masking():
    assert abs(float(loss_mae(Tensor([2.0, 2.0]), [1.0, 4.0]).data) - 1.5) < 1e-7
    masked = loss_mae(Tensor([9.0, 3.0]), [0.0, 2.0], null_value=0.0)
    assert abs(float(masked.data) - 1.0) < 1e-7
    all_masked = loss_mae(Tensor([9.0, 3.0]), [0.0, 0.0], null_value=0.0)
    assert float(all_masked.data) == 0.0
    with pytest.raises(ValueError, match="shape mismatch"):
        loss_mae(Tensor([1.0, 2.0]), [1.0, 2.0, 3.0])


def test_loss_mae_gradient_skips_masked_entries():
    pred = Tensor(np.array([5.0, 7.0, 1.0], dtype=np.float32), requires_grad=True)
    with GradTape() as tape:
        loss = loss_mae(pred, np.array([4.0, 0.0, 3.0]), null_value=0.0)
        tape.backward(loss)
    assert np.allclose(pred.grad, [0.5, 0.0, -0.5])


def test_whole_model_gradients_on_a_small_instance():
    with dtype_scope(np.float64):
        model = _model(n_layers=1, n_upper=1, seed=11)
        c = model.config
        rng = np.random.default_rng(12)
        x = rng.standard_normal((1, c.t_in, c.n_nodes, c.f_in))
        true = rng.standard_normal((1, c.t_out, c.n_nodes, c.f_out))
        slots = np.array([3, 4])
        dow = np.array([2, 2])

        def f():
            pred = model.forward(Tensor(x), slots, dow)
            return loss_mae(pred, true)

        report = grad_check(f, model.trainable_parameters(), tol=1e-4,
                            max_entries_per_param=4, rng=np.random.default_rng(13))
    assert report.passed, repr(report)
