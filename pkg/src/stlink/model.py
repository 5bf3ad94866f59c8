"""End-to-end forecasting model over the flattened (time, node) token grid.

Pipeline: pointwise feature embedding fused with time-of-day, day-of-week and
node embeddings -> L stacked {attention block, memory FFN block} pairs -> a
per-node linear head mapping the node's T_in concatenated token states to
T_out * F_out values. Lower layers can be frozen except their LayerNorm
affines; the optimizer must be built from trainable_parameters() so frozen
tensors are never touched.

Initialization draws from a single generator in a fixed documented order:
embedding tables (conv, time-of-day, day-of-week, node), then per layer the
attention block followed by the FFN block, then the head. Biases and affine
parameters are deterministic (zeros/ones) and consume no draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import SeAttentionBlock
from .mrffn import MrffnBlock
from .tensor import Tensor, as_tensor, default_dtype, gather_rows, randn_param


@dataclass
class ModelConfig:
    n_nodes: int
    f_in: int = 1
    f_out: int = 1
    t_in: int = 12
    t_out: int = 12
    d_model: int = 64
    n_layers: int = 3
    n_upper: int = 1
    heads: int = 4
    dropout: float = 0.1
    mem_slots: int = 16
    top_k_mem: int = 4
    n_experts: int = 4
    top_k_exp: int = 2
    d_ff: int | None = None
    alpha: float = 0.1
    tod_slots: int = 288
    eps: float = 1e-5
    seed: int = 0
    attention_mode: str = "full"   # full | temporal_only | plain
    ffn_mode: str = "full"         # full | no_memory | dense
    # train-split feature scaler, carried so checkpoints are self-contained
    scaler_mean: list = field(default_factory=lambda: [0.0])
    scaler_std: list = field(default_factory=lambda: [1.0])

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if not (0 <= self.n_upper <= self.n_layers):
            raise ValueError(f"n_upper {self.n_upper} outside [0, {self.n_layers}]")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if self.attention_mode != "plain" and (self.d_model // self.heads) % 4 != 0:
            raise ValueError("head dimension must be divisible by 4")
        if self.t_in < 1 or self.t_out < 1:
            raise ValueError("t_in and t_out must be at least 1")
        if len(self.scaler_mean) != self.f_out or len(self.scaler_std) != self.f_out:
            raise ValueError("scaler length must equal f_out")


class Model:

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        c = config
        dt = default_dtype()
        sd = 0.02
        self.conv_w = randn_param(rng, (c.f_in, c.d_model), sd)
        self.conv_b = Tensor(np.zeros(c.d_model, dtype=dt), requires_grad=True)
        self.tod_table = randn_param(rng, (c.tod_slots, c.d_model), sd)
        self.dow_table = randn_param(rng, (7, c.d_model), sd)
        self.node_table = randn_param(rng, (c.n_nodes, c.d_model), sd)
        self.layers = []
        for _ in range(c.n_layers):
            attn = SeAttentionBlock(c.d_model, c.heads, c.n_nodes, c.t_in, c.dropout,
                                    rng, mode=c.attention_mode, eps=c.eps)
            ffn = MrffnBlock(c.d_model, c.d_ff, c.mem_slots, c.top_k_mem, c.n_experts,
                             c.top_k_exp, c.alpha, c.dropout, rng, mode=c.ffn_mode,
                             eps=c.eps)
            self.layers.append((attn, ffn))
        head_in = c.t_in * c.d_model
        head_out = c.t_out * c.f_out
        self.head_w = randn_param(rng, (c.n_nodes, head_in, head_out), sd)
        self.head_b = Tensor(np.zeros((c.n_nodes, 1, head_out), dtype=dt), requires_grad=True)
        self._scaler_mean = np.asarray(c.scaler_mean, dtype=dt)
        self._scaler_std = np.asarray(c.scaler_std, dtype=dt)
        self.apply_freeze_policy()

    def parameters(self) -> dict:
        params = {
            "embed.conv_w": self.conv_w,
            "embed.conv_b": self.conv_b,
            "embed.tod_table": self.tod_table,
            "embed.dow_table": self.dow_table,
            "embed.node_table": self.node_table,
        }
        for i, (attn, ffn) in enumerate(self.layers):
            for name, t in attn.parameters().items():
                params[f"layers.{i}.attn.{name}"] = t
            for name, t in ffn.parameters().items():
                params[f"layers.{i}.ffn.{name}"] = t
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        return params

    def trainable_parameters(self) -> dict:
        return {k: v for k, v in self.parameters().items() if v.requires_grad}

    def apply_freeze_policy(self, n_upper: int | None = None) -> dict:
        """Freeze the lower L - U layers except LayerNorm affines.

        Returns the per-parameter trainable mask. Memory keys stay out of the
        gradient tape everywhere; their EMA refresh is also disabled inside
        frozen layers so frozen state is bit-stable.
        """
        c = self.config
        u = c.n_upper if n_upper is None else n_upper
        if not (0 <= u <= c.n_layers):
            raise ValueError(f"n_upper {u} outside [0, {c.n_layers}]")
        c.n_upper = u
        frozen_below = c.n_layers - u
        for i, (attn, ffn) in enumerate(self.layers):
            frozen = i < frozen_below
            for name, t in {**attn.parameters(), **ffn.parameters()}.items():
                if name == "mem_keys":
                    t.requires_grad = False
                elif name in ("ln_gamma", "ln_beta"):
                    t.requires_grad = True
                else:
                    t.requires_grad = not frozen
            ffn.ema_enabled = not frozen
        return {name: t.requires_grad for name, t in self.parameters().items()}

    def embed_input(self, x, slots, dow) -> Tensor:
        """Token embeddings H0 (B, T_in*N, d_model) from X (B, T_in, N, F_in).

        slots/dow give each input step's time-of-day slot and day-of-week,
        shaped (T_in,) or (B, T_in).
        """
        c = self.config
        x = as_tensor(x)
        b = x.data.shape[0]
        if x.data.shape[1:] != (c.t_in, c.n_nodes, c.f_in):
            raise ValueError(
                f"input shape {x.data.shape[1:]} != (t_in, n_nodes, f_in) = "
                f"({c.t_in}, {c.n_nodes}, {c.f_in})")
        slots = np.asarray(slots)
        dow = np.asarray(dow)
        if slots.min() < 0 or slots.max() >= c.tod_slots:
            raise ValueError(f"time-of-day slot outside [0, {c.tod_slots})")
        if dow.min() < 0 or dow.max() >= 7:
            raise ValueError("day-of-week outside [0, 7)")
        tokens = x @ self.conv_w + self.conv_b
        time_shape = (1 if slots.ndim == 1 else b, c.t_in, 1, c.d_model)
        tokens = tokens + gather_rows(self.tod_table, slots).reshape(time_shape)
        tokens = tokens + gather_rows(self.dow_table, dow).reshape(time_shape)
        tokens = tokens + self.node_table.reshape((1, 1, c.n_nodes, c.d_model))
        return tokens.reshape((b, c.t_in * c.n_nodes, c.d_model))

    def forward(self, x, slots, dow, rng: np.random.Generator | None = None,
                train_mode: bool = False) -> Tensor:
        """Predict (B, T_out, N, F_out) in data units."""
        c = self.config
        if rng is None:
            if train_mode and c.dropout > 0:
                raise ValueError("training forward with dropout needs an rng")
            rng = np.random.default_rng(0)
        h = self.embed_input(x, slots, dow)
        for i, (attn, ffn) in enumerate(self.layers):
            h = attn.forward(h, rng, train_mode)
            h = ffn.forward(h, rng, train_mode)
            if not np.isfinite(h.data).all():
                raise ValueError(f"non-finite hidden state after layer {i}")
        b = h.data.shape[0]
        # per-node readout: concatenate the node's T_in states, map linearly
        node_states = (h.reshape((b, c.t_in, c.n_nodes, c.d_model))
                       .transpose((0, 2, 1, 3))
                       .reshape((b, c.n_nodes, c.t_in * c.d_model))
                       .transpose((1, 0, 2)))
        out = node_states @ self.head_w + self.head_b
        pred = (out.transpose((1, 0, 2))
                .reshape((b, c.n_nodes, c.t_out, c.f_out))
                .transpose((0, 2, 1, 3)))
        # head operates in z-scored space; rescale to data units
        return pred * self._scaler_std + self._scaler_mean

    def apply_key_updates(self) -> None:
        for _, ffn in self.layers:
            if ffn.ema_enabled:
                ffn.apply_key_update()

    def slot_counts(self) -> list:
        counts = []
        for _, ffn in self.layers:
            counts.append(ffn.take_slot_counts().tolist() if ffn.mode != "dense" else [])
        return counts


def loss_mae(pred, true, null_value=None) -> Tensor:
    """Mean absolute error over entries where true != null_value."""
    pred = as_tensor(pred)
    true = np.asarray(true, dtype=pred.data.dtype)
    if pred.data.shape != true.shape:
        raise ValueError(f"shape mismatch: pred {pred.data.shape} vs true {true.shape}")
    diff = (pred - Tensor(true)).abs()
    if null_value is None:
        return diff.mean()
    mask = (true != null_value)
    count = int(mask.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=pred.data.dtype))
    return (diff * Tensor(mask.astype(pred.data.dtype))).sum() / float(count)
