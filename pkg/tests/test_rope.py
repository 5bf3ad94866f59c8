"""Rotary embedding reference forms: frequencies, rotations, projections."""

import numpy as np
import pytest

from stlink.rope import (
    PhiProjection,
    phi_project,
    rope_frequencies,
    rope_spatial,
    rope_temporal,
    spatial_angles,
    temporal_angles,
)
from stlink.tensor import GradTape, Tensor, tensor_sum


def test_frequencies_follow_inverse_power_law():
    d = 8
    freqs = rope_frequencies(d)
    assert freqs.shape == (4,)
    assert freqs[0] == 1.0
    expected = 10000.0 ** (-2.0 * np.arange(4) / d)
    assert np.allclose(freqs, expected, atol=1e-15)
    assert (np.diff(freqs) < 0).all()


def test_frequencies_reject_odd_or_tiny_dimension():
    with pytest.raises(ValueError, match="must be even"):
        rope_frequencies(5)
    with pytest.raises(ValueError, match="must be even"):
        rope_frequencies(0)


def test_temporal_angles_outer_product():
    freqs = rope_frequencies(4)
    table = temporal_angles([0.0, 1.0, 3.0], freqs)
    assert table.shape == (3, 2)
    assert np.allclose(table[0], 0.0)
    assert np.allclose(table[2], 3.0 * freqs, atol=1e-15)


def test_temporal_rotation_at_zero_is_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(8)
    assert np.allclose(rope_temporal(x, 0.0, rope_frequencies(8)), x, atol=1e-15)


def test_temporal_dot_depends_only_on_relative_position():
    rng = np.random.default_rng(1)
    freqs = rope_frequencies(8)
    for _ in range(25):
        q = rng.standard_normal(8)
        k = rng.standard_normal(8)
        m, n, s = rng.uniform(0, 50, 3)
        base = rope_temporal(q, m, freqs) @ rope_temporal(k, n, freqs)
        moved = rope_temporal(q, m + s, freqs) @ rope_temporal(k, n + s, freqs)
        assert abs(base - moved) < 1e-9


def test_temporal_rotation_preserves_norm():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(12)
    y = rope_temporal(x, 17.3, rope_frequencies(12))
    assert abs(np.linalg.norm(x) - np.linalg.norm(y)) < 1e-12


def test_spatial_rotation_keeps_second_half_verbatim():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(8)
    scale = Tensor(np.array([0.7, 2.0]))
    y = rope_spatial(x, 1, scale, rope_frequencies(8))
    assert np.array_equal(y[4:], x[4:])
    assert not np.allclose(y[:4], x[:4], atol=1e-6)


def test_spatial_rotation_uses_node_scale_entry():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(8)
    freqs = rope_frequencies(8)
    scale = np.array([0.0, 1.5])
    y0 = rope_spatial(x, 0, scale, freqs)
    assert np.allclose(y0, x, atol=1e-15)
    y1 = rope_spatial(x, 1, scale, freqs)
    manual = rope_temporal(x[:4], 1.5, freqs[:2])
    assert np.allclose(y1[:4], manual, atol=1e-12)


def test_spatial_rotation_rejects_dimension_not_multiple_of_four():
    with pytest.raises(ValueError, match="divisible by 4"):
        rope_spatial(np.ones(6), 0, np.ones(2), rope_frequencies(6))


def test_phi_project_concatenates_and_projects():
    rng = np.random.default_rng(5)
    d = 8
    x = rng.standard_normal(d)
    freqs = rope_frequencies(d)
    w_q = Tensor(rng.standard_normal((2 * d, d)).astype(np.float32))
    w_k = Tensor(rng.standard_normal((2 * d, d)).astype(np.float32))
    proj = PhiProjection(w_q, w_k)
    scale = np.array([1.0, 0.25])
    out = phi_project(x, 3.0, 1, proj, scale, freqs, "query")
    manual = np.concatenate([
        rope_temporal(x, 3.0, freqs),
        rope_spatial(x, 1, scale, freqs),
    ]) @ w_q.data.astype(np.float64)
    assert np.allclose(out, manual, atol=1e-12)
    out_k = phi_project(x, 3.0, 1, proj, scale, freqs, "key")
    assert not np.allclose(out, out_k, atol=1e-3)


def test_phi_project_validates_which():
    proj = PhiProjection(Tensor(np.ones((4, 2))), Tensor(np.ones((4, 2))))
    with pytest.raises(ValueError, match="query.*key"):
        phi_project(np.ones(2), 0.0, 0, proj, np.ones(1), rope_frequencies(2), "value")


def test_spatial_angles_table_and_gradient():
    n_in = Tensor(np.array([2.0, 0.5, 1.0], dtype=np.float32), requires_grad=True)
    freqs = rope_frequencies(16)[:4]
    ids = np.array([0, 1, 1, 2])
    with GradTape() as tape:
        theta = spatial_angles(n_in, ids, freqs)
        assert theta.shape == (4, 4)
        assert np.allclose(theta.data, np.outer(n_in.data[ids], freqs), atol=1e-7)
        tape.backward(tensor_sum(theta))
    s = freqs.sum()
    assert np.allclose(n_in.grad, [s, 2 * s, s], atol=1e-6)
