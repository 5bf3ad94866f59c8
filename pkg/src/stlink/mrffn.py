"""Memory retrieval feed-forward network.

Per token: retrieve the top-k memory slots by raw dot-product similarity
(softmax over the selected similarities only), read a weighted value vector
z_r, take a dense temperature-scaled attention summary over all slots, gate a
mixture of experts on concat(hidden, z_r, summary), and run only the top-k
experts, whose gate weights are NOT renormalized. Residual + LayerNorm close
the block.

Keys are excluded from the gradient tape and refreshed by a momentum EMA
toward the weighted mean of the tokens that selected them, applied once per
training batch. Values and everything else train by gradient.

The module-level functions are single-vector reference forms used by tests;
MrffnBlock is the batched taped implementation.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import (Tensor, concat, default_dtype, gather_last, gather_rows,
                     narrow, randn_param, scatter_rows, transpose)

MODES = ("full", "no_memory", "dense")


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


class MemoryState:
    """M key/value slots plus retrieval and EMA settings."""

    def __init__(self, keys, values, alpha: float, top_k_mem: int):
        m = _as_array(keys).shape[0]
        if not (1 <= top_k_mem <= m):
            raise ValueError(f"top_k_mem {top_k_mem} out of range for {m} slots")
        if not (0.0 <= alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")
        self.keys = keys
        self.values = values
        self.alpha = alpha
        self.top_k_mem = top_k_mem


class MoeParams:
    """E experts (each d -> d_ff -> d) plus the gate matrix and width."""

    def __init__(self, experts: list, w_g, top_k_exp: int):
        if not (1 <= top_k_exp <= len(experts)):
            raise ValueError(f"top_k_exp {top_k_exp} out of range for {len(experts)} experts")
        self.experts = experts
        self.w_g = w_g
        self.top_k_exp = top_k_exp


def _top_k_desc(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort so ties break toward the lower slot index
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def memory_retrieve(x, mem: MemoryState):
    """Top-k read for one d-vector: returns (z_r, weights, indices)."""
    x = np.asarray(x, dtype=np.float64)
    keys = _as_array(mem.keys).astype(np.float64)
    values = _as_array(mem.values).astype(np.float64)
    scores = keys @ x
    idx = _top_k_desc(scores, mem.top_k_mem)
    sel = scores[idx]
    e = np.exp(sel - sel.max())
    weights = e / e.sum()
    z_r = weights @ values[idx]
    return z_r, weights, idx


def memory_update_keys(mem: MemoryState, batch_tokens) -> np.ndarray:
    """Momentum EMA toward the weighted mean of selecting tokens.

    batch_tokens is a list of (x, weights, indices) triples as produced by
    memory_retrieve. Slots never selected stay unchanged. Mutates mem.keys
    in place and returns the key array.
    """
    keys = _as_array(mem.keys)
    d = keys.shape[1]
    acc_wx = np.zeros((keys.shape[0], d), dtype=np.float64)
    acc_w = np.zeros(keys.shape[0], dtype=np.float64)
    for x, weights, idx in batch_tokens:
        x = np.asarray(x, dtype=np.float64)
        for w, m in zip(np.asarray(weights, dtype=np.float64), np.asarray(idx)):
            acc_wx[m] += w * x
            acc_w[m] += w
    hit = acc_w > 0
    target = acc_wx[hit] / acc_w[hit, None]
    keys[hit] = ((1.0 - mem.alpha) * keys[hit].astype(np.float64)
                 + mem.alpha * target).astype(keys.dtype)
    return keys


def attention_summary(x, mem: MemoryState, scaled: bool = True) -> np.ndarray:
    """Dense read over all M slots: softmax(x . K^T / sqrt(d)) @ V.

    scaled=False drops the sqrt(d) temperature (test hook for comparing
    against a full-width retrieval softmax).
    """
    x = np.asarray(x, dtype=np.float64)
    keys = _as_array(mem.keys).astype(np.float64)
    values = _as_array(mem.values).astype(np.float64)
    scores = keys @ x
    if scaled:
        scores = scores / np.sqrt(x.shape[-1])
    e = np.exp(scores - scores.max())
    return (e / e.sum()) @ values


def moe_forward(h, z_r, a_bar, moe: MoeParams) -> np.ndarray:
    """Gate over ALL experts, run the top-k, sum g_e * Expert_e(h).

    Selected gate weights are kept as-is (no renormalization), so the output
    shrinks when the gate spreads mass outside the selected set.
    """
    h = np.asarray(h, dtype=np.float64)
    gate_in = np.concatenate([h, np.asarray(z_r, np.float64), np.asarray(a_bar, np.float64)])
    logits = gate_in @ _as_array(moe.w_g).astype(np.float64)
    e = np.exp(logits - logits.max())
    g = e / e.sum()
    idx = _top_k_desc(g, moe.top_k_exp)
    out = np.zeros_like(h)
    for eidx in idx:
        w1, b1, w2, b2 = (_as_array(p).astype(np.float64) for p in moe.experts[eidx])
        hidden = _gelu64(h @ w1 + b1)
        out += g[eidx] * (hidden @ w2 + b2)
    return out


def _gelu64(x: np.ndarray) -> np.ndarray:
    c = 0.7978845608028654
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


class MrffnBlock:

    def __init__(self, d_model: int, d_ff: int, n_slots: int, top_k_mem: int,
                 n_experts: int, top_k_exp: int, alpha: float, dropout: float,
                 rng: np.random.Generator, mode: str = "full", eps: float = 1e-5):
        if mode not in MODES:
            raise ValueError(f"unknown mrffn mode {mode!r}")
        self.d_model = d_model
        self.d_ff = d_ff
        self.dropout = dropout
        self.mode = mode
        self.eps = eps
        # freeze policy may disable the EMA refresh along with the gradients
        self.ema_enabled = True

        dt = default_dtype()
        sd = 0.02
        if mode == "dense":
            self.w1 = randn_param(rng, (d_model, d_ff), sd)
            self.b1 = Tensor(np.zeros(d_ff, dtype=dt), requires_grad=True)
            self.w2 = randn_param(rng, (d_ff, d_model), sd)
            self.b2 = Tensor(np.zeros(d_model, dtype=dt), requires_grad=True)
        else:
            raw = rng.standard_normal((n_slots, d_model))
            keys = Tensor((raw / np.linalg.norm(raw, axis=1, keepdims=True)).astype(dt))
            keys.requires_grad = False  # EMA-refreshed, never gradient-trained
            values = randn_param(rng, (n_slots, d_model), sd)
            self.memory = MemoryState(keys, values, alpha, top_k_mem)
            self.n_experts = n_experts
            self.top_k_exp = top_k_exp
            self.experts = []
            for _ in range(n_experts):
                self.experts.append((
                    randn_param(rng, (d_model, d_ff), sd),
                    Tensor(np.zeros(d_ff, dtype=dt), requires_grad=True),
                    randn_param(rng, (d_ff, d_model), sd),
                    Tensor(np.zeros(d_model, dtype=dt), requires_grad=True),
                ))
            gate_width = d_model if mode == "no_memory" else 3 * d_model
            self.w_g = randn_param(rng, (gate_width, n_experts), sd)
            self._ema_wx = np.zeros((n_slots, d_model), dtype=np.float64)
            self._ema_w = np.zeros(n_slots, dtype=np.float64)
            self._select_counts = np.zeros(n_slots, dtype=np.int64)
        self.ln_gamma = Tensor(np.ones(d_model, dtype=dt), requires_grad=True)
        self.ln_beta = Tensor(np.zeros(d_model, dtype=dt), requires_grad=True)

    def parameters(self) -> dict:
        if self.mode == "dense":
            params = {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}
        else:
            params = {"mem_keys": self.memory.keys, "mem_values": self.memory.values}
            for e, (w1, b1, w2, b2) in enumerate(self.experts):
                params[f"expert{e}_w1"] = w1
                params[f"expert{e}_b1"] = b1
                params[f"expert{e}_w2"] = w2
                params[f"expert{e}_b2"] = b2
            params["w_g"] = self.w_g
        params["ln_gamma"] = self.ln_gamma
        params["ln_beta"] = self.ln_beta
        return params

    def _retrieve(self, x, r: int):
        """Batched top-k read over rows x (R, d): (z_r, weights, indices)."""
        mem = self.memory
        scores = x @ transpose(mem.keys, (1, 0))
        idx = _top_k_desc(scores.data, mem.top_k_mem)
        weights = ops.softmax(gather_last(scores, idx))
        vals = gather_rows(mem.values, idx)
        z_r = (weights.reshape((r, mem.top_k_mem, 1)) * vals).sum(axis=1)
        return z_r, weights, idx, scores

    def _stage_key_update(self, x_data: np.ndarray, weights: np.ndarray, idx: np.ndarray):
        flat_idx = idx.reshape(-1)
        contrib = (weights[:, :, None] * x_data[:, None, :].astype(np.float64))
        np.add.at(self._ema_wx, flat_idx, contrib.reshape(-1, self.d_model))
        np.add.at(self._ema_w, flat_idx, weights.astype(np.float64).reshape(-1))
        np.add.at(self._select_counts, flat_idx, 1)

    def apply_key_update(self) -> None:
        """EMA refresh from the staged batch statistics; call once per batch."""
        if self.mode == "dense":
            return
        hit = self._ema_w > 0
        if hit.any():
            keys = self.memory.keys.data
            target = self._ema_wx[hit] / self._ema_w[hit, None]
            blended = ((1.0 - self.memory.alpha) * keys[hit].astype(np.float64)
                       + self.memory.alpha * target)
            keys[hit] = blended.astype(keys.dtype)
        self._ema_wx[:] = 0.0
        self._ema_w[:] = 0.0

    def take_slot_counts(self) -> np.ndarray:
        counts = self._select_counts.copy()
        self._select_counts[:] = 0
        return counts

    def _experts_mixed(self, x, gate_in, r: int):
        """Run the gate and the selected experts over rows x (R, d)."""
        g = ops.softmax(gate_in @ self.w_g)
        eidx = _top_k_desc(g.data, self.top_k_exp)
        out = Tensor(np.zeros((r, self.d_model), dtype=x.data.dtype))
        for e in range(self.n_experts):
            rows = np.nonzero((eidx == e).any(axis=1))[0]
            if rows.size == 0:
                continue
            w1, b1, w2, b2 = self.experts[e]
            sub = gather_rows(x, rows)
            expert_out = ops.gelu(sub @ w1 + b1) @ w2 + b2
            gate_col = narrow(gather_rows(g, rows), -1, e, 1)
            out = out + scatter_rows(expert_out * gate_col, rows, r)
        return out

    def forward(self, h, rng: np.random.Generator, train_mode: bool) -> Tensor:
        """One block pass over hidden states (B, L, d_model)."""
        b, length, d = h.data.shape
        if d != self.d_model:
            raise ValueError(f"model width {d} != d_model {self.d_model}")
        r = b * length
        x = h.reshape((r, d))
        if self.mode == "dense":
            out = ops.gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2
        else:
            if self.mode == "no_memory":
                gate_in = x
            else:
                z_r, weights, idx, scores = self._retrieve(x, r)
                if train_mode and self.ema_enabled:
                    self._stage_key_update(x.data, weights.data, idx)
                summary = ops.softmax(scores * (1.0 / np.sqrt(d))) @ self.memory.values
                gate_in = concat([x, z_r, summary], axis=-1)
            out = self._experts_mixed(x, gate_in, r)
        out = ops.dropout(out.reshape((b, length, d)), self.dropout, rng, train_mode)
        return ops.layer_norm(h + out, self.ln_gamma, self.ln_beta, self.eps)
