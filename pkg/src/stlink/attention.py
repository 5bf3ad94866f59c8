"""Spatially-enhanced attention block over the flattened (time, node) grid.

Tokens are laid out time-major: token l covers time l // N and node l % N,
sequence length L = T_in * N. The block normalizes its input per node,
projects Q/K/V, rotates each head's queries and keys both temporally (full
head width) and spatially (first half only, per-node learnable angle scale),
reduces the concatenated 2*d_h rotation back to d_h, runs bidirectional
scaled dot-product attention, denormalizes, and finishes with dropout,
residual and LayerNorm.

Ablation modes: "temporal_only" duplicates the temporal rotation in place of
the spatial one (keeping the 2*d_h concat), "plain" drops the rotations and
the normalize/denormalize wrap entirely.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .revin import RevinParams, revin_denormalize, revin_normalize
from .rope import rope_frequencies, spatial_angles, temporal_angles
from .tensor import Tensor, concat, default_dtype, narrow, randn_param, transpose

MODES = ("full", "temporal_only", "plain")


class SeAttentionBlock:

    def __init__(self, d_model: int, heads: int, n_nodes: int, t_in: int,
                 dropout: float, rng: np.random.Generator, mode: str = "full",
                 eps: float = 1e-5):
        if mode not in MODES:
            raise ValueError(f"unknown attention mode {mode!r}")
        if d_model % heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        d_h = d_model // heads
        if mode != "plain" and d_h % 4 != 0:
            raise ValueError(f"head dimension {d_h} must be divisible by 4")
        self.d_model = d_model
        self.heads = heads
        self.d_h = d_h
        self.n_nodes = n_nodes
        self.t_in = t_in
        self.seq_len = t_in * n_nodes
        self.dropout = dropout
        self.mode = mode
        self.eps = eps

        dt = default_dtype()
        sd = 0.02
        self.w_q = randn_param(rng, (d_model, d_model), sd)
        self.w_k = randn_param(rng, (d_model, d_model), sd)
        self.w_v = randn_param(rng, (d_model, d_model), sd)
        self.w_o = randn_param(rng, (d_model, d_model), sd)

        if mode != "plain":
            # reduce concat(temporal, spatial) back to head width; start near
            # the average of the two halves
            base = np.vstack([np.eye(d_h), np.eye(d_h)]) * 0.5
            self.phi_wq = Tensor(
                (base[None] + rng.standard_normal((heads, 2 * d_h, d_h)) * sd).astype(dt),
                requires_grad=True)
            self.phi_wk = Tensor(
                (base[None] + rng.standard_normal((heads, 2 * d_h, d_h)) * sd).astype(dt),
                requires_grad=True)
            self.freqs = rope_frequencies(d_h)
            t_of_token = np.arange(self.seq_len) // n_nodes
            self.theta_t = Tensor(temporal_angles(t_of_token, self.freqs).astype(dt))
        if mode == "full":
            # per-node angle scale, initialized to the node index
            self.n_in = Tensor(np.arange(n_nodes, dtype=dt), requires_grad=True)
            self.node_of_token = np.arange(self.seq_len) % n_nodes
            self.revin = RevinParams(
                Tensor(np.ones(n_nodes, dtype=dt), requires_grad=True),
                Tensor(np.zeros(n_nodes, dtype=dt), requires_grad=True),
                eps,
            )
        self.ln_gamma = Tensor(np.ones(d_model, dtype=dt), requires_grad=True)
        self.ln_beta = Tensor(np.zeros(d_model, dtype=dt), requires_grad=True)

    def parameters(self) -> dict:
        params = {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}
        if self.mode != "plain":
            params["phi_wq"] = self.phi_wq
            params["phi_wk"] = self.phi_wk
        if self.mode == "full":
            params["n_in"] = self.n_in
            params["revin_gamma"] = self.revin.gamma
            params["revin_beta"] = self.revin.beta
        params["ln_gamma"] = self.ln_gamma
        params["ln_beta"] = self.ln_beta
        return params

    # layout helpers: (B, L, d) <-> per-node rows (B, N, T*d)
    def _to_node_major(self, x):
        b = x.shape[0]
        return (x.reshape((b, self.t_in, self.n_nodes, self.d_model))
                .transpose((0, 2, 1, 3))
                .reshape((b, self.n_nodes, self.t_in * self.d_model)))

    def _to_time_major(self, x):
        b = x.shape[0]
        return (x.reshape((b, self.n_nodes, self.t_in, self.d_model))
                .transpose((0, 2, 1, 3))
                .reshape((b, self.seq_len, self.d_model)))

    def _split_heads(self, x):
        b = x.shape[0]
        return x.reshape((b, self.seq_len, self.heads, self.d_h)).transpose((0, 2, 1, 3))

    def _merge_heads(self, x):
        b = x.shape[0]
        return x.transpose((0, 2, 1, 3)).reshape((b, self.seq_len, self.d_model))

    def _phi(self, x, w):
        """Apply the rotary enhancement to per-head states (B, H, L, d_h)."""
        xt = ops.rope_rotate(x, self.theta_t)
        if self.mode == "temporal_only":
            combined = concat([xt, xt], axis=-1)
        else:
            half = self.d_h // 2
            theta_s = spatial_angles(self.n_in, self.node_of_token, self.freqs[: self.d_h // 4])
            rotated = ops.rope_rotate(narrow(x, -1, 0, half), theta_s)
            xs = concat([rotated, narrow(x, -1, half, half)], axis=-1)
            combined = concat([xt, xs], axis=-1)
        return combined @ w

    def _attend(self, hn):
        """Project, rotate and attend; returns (weights, context)."""
        q = self._split_heads(hn @ self.w_q)
        k = self._split_heads(hn @ self.w_k)
        v = self._split_heads(hn @ self.w_v)
        if self.mode != "plain":
            q = self._phi(q, self.phi_wq)
            k = self._phi(k, self.phi_wk)
        logits = (q @ transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.d_h))
        weights = ops.softmax(logits)
        return weights, self._merge_heads(weights @ v)

    def _check_shape(self, h):
        if h.data.ndim != 3:
            raise ValueError(f"expected (B, L, d_model), got ndim {h.data.ndim}")
        if h.data.shape[1] != self.seq_len:
            raise ValueError(
                f"sequence length {h.data.shape[1]} != T_in*N = {self.seq_len}")
        if h.data.shape[2] != self.d_model:
            raise ValueError(f"model width {h.data.shape[2]} != d_model {self.d_model}")

    def forward(self, h, rng: np.random.Generator, train_mode: bool,
                attn_identity: bool = False) -> Tensor:
        """One block pass over hidden states (B, L, d_model).

        attn_identity is a test hook replacing the whole projection/attention
        stack with the identity on the normalized states, exposing the
        normalize/denormalize wrap in isolation.
        """
        self._check_shape(h)
        if self.mode == "full":
            hn, stats = revin_normalize(self._to_node_major(h), self.revin)
            hn = self._to_time_major(hn)
        else:
            hn = h
        if attn_identity:
            out = hn
        else:
            _, ctx = self._attend(hn)
            out = ctx @ self.w_o
        if self.mode == "full":
            out = revin_denormalize(self._to_node_major(out), stats, self.revin)
            out = self._to_time_major(out)
        out = ops.dropout(out, self.dropout, rng, train_mode)
        return ops.layer_norm(h + out, self.ln_gamma, self.ln_beta, self.eps)

    def attention_weights(self, h) -> np.ndarray:
        """Diagnostic (B, heads, L, L) weight tensor, eval mode, untaped."""
        self._check_shape(h)
        if self.mode == "full":
            hn, _ = revin_normalize(self._to_node_major(h), self.revin)
            hn = self._to_time_major(hn)
        else:
            hn = h
        weights, _ = self._attend(hn)
        return weights.data
