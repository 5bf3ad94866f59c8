"""Training loop, evaluation harness, ablation wiring, run logging.

One generator drives a run, seeded from the run seed (STLINK_SEED wins over
config). Draw order: model initialization, then per epoch the shuffle
permutation followed by per-batch dropout masks. The dataset itself is
generated or loaded independently of the run seed, so reseeding a run never
moves the splits.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import data as data_mod
from .checkpoint import save_checkpoint
from .model import Model, ModelConfig, loss_mae
from .optim import Adam
from .tensor import GradTape, Tensor


@dataclass
class RunConfig:
    # data source: a dataset file, or the synthetic generator
    data_path: str | None = None
    synth_nodes: int = 8
    synth_steps: int = 2016
    synth_seed: int = 7
    synth_options: dict = field(default_factory=dict)
    ratio: tuple = (7, 1, 2)
    null_value: float | None = None
    # architecture
    d_model: int = 64
    n_layers: int = 3
    n_upper: int = 1
    heads: int = 4
    t_in: int = 12
    t_out: int = 12
    dropout: float = 0.1
    mem_slots: int = 16
    top_k_mem: int = 4
    n_experts: int = 4
    top_k_exp: int = 2
    d_ff: int | None = None
    alpha: float = 0.1
    # optimization
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 30
    patience: int = 10
    seed: int = 0
    # ablations
    no_se_attention: bool = False
    standard_rope: bool = False
    no_memory: bool = False
    standard_ffn: bool = False
    horizons: tuple = (3, 6, 12)

    def resolved_seed(self) -> int:
        env = os.environ.get("STLINK_SEED")
        return int(env) if env else self.seed


class RunLog:
    """Append-only per-epoch records plus the final test metrics.

    JSONL schema, one object per line tagged by "type":
      config: every RunConfig field plus ratio/horizons as lists and the
              resolved_seed actually used
      epoch:  epoch, train_loss, val (aggregate mae/rmse/mape), wall_time_s,
              slot_counts (per-layer memory selection counts)
      final:  best_epoch, best_val_mae, test (aggregate and per-horizon)
    """

    def __init__(self, config: dict):
        self.config = config
        self.epochs = []
        self.final = None

    def add_epoch(self, record: dict) -> None:
        self.epochs.append(record)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "config", **self.config}, sort_keys=True)]
        for rec in self.epochs:
            lines.append(json.dumps({"type": "epoch", **rec}, sort_keys=True))
        if self.final is not None:
            lines.append(json.dumps({"type": "final", **self.final}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @staticmethod
    def canonical(jsonl_text: str) -> str:
        """Comparison form: wall-clock fields stripped, content intact."""
        lines = []
        for line in jsonl_text.strip().splitlines():
            rec = json.loads(line)
            rec.pop("wall_time_s", None)
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"


def load_bundle(config: RunConfig) -> data_mod.DatasetBundle:
    if config.data_path:
        return data_mod.load_dataset(config.data_path)
    return data_mod.synth_generate(config.synth_nodes, config.synth_steps,
                                   config.synth_seed, **config.synth_options)


def ablation_build(config: RunConfig, bundle: data_mod.DatasetBundle,
                   rng: np.random.Generator) -> Model:
    """Translate ablation flags into block modes and build the model."""
    if config.standard_ffn and config.no_memory:
        raise ValueError("standard_ffn and no_memory are contradictory: "
                         "the dense FFN has no memory to disable")
    if config.no_se_attention:
        attention_mode = "plain"
    elif config.standard_rope:
        attention_mode = "temporal_only"
    else:
        attention_mode = "full"
    if config.standard_ffn:
        ffn_mode = "dense"
    elif config.no_memory:
        ffn_mode = "no_memory"
    else:
        ffn_mode = "full"
    mean, std = bundle.scaler
    model_config = ModelConfig(
        n_nodes=bundle.n_nodes, f_in=bundle.n_features, f_out=bundle.n_features,
        t_in=config.t_in, t_out=config.t_out, d_model=config.d_model,
        n_layers=config.n_layers, n_upper=config.n_upper, heads=config.heads,
        dropout=config.dropout, mem_slots=config.mem_slots,
        top_k_mem=config.top_k_mem, n_experts=config.n_experts,
        top_k_exp=config.top_k_exp, d_ff=config.d_ff, alpha=config.alpha,
        tod_slots=bundle.tod_slots, seed=config.resolved_seed(),
        attention_mode=attention_mode, ffn_mode=ffn_mode,
        scaler_mean=[float(v) for v in mean], scaler_std=[float(v) for v in std],
    )
    return Model(model_config, rng)


def _batches(n: int, batch_size: int, order=None):
    order = np.arange(n) if order is None else order
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def predict_windows(model: Model, windows: data_mod.Windows,
                    batch_size: int = 64) -> np.ndarray:
    """Eval-mode predictions (W, T_out, N, F) in data units."""
    preds = []
    for idx in _batches(len(windows), batch_size):
        pred = model.forward(windows.x[idx], windows.slots[idx], windows.dow[idx],
                             train_mode=False)
        preds.append(pred.data)
    return np.concatenate(preds, axis=0)


def evaluate_windows(model: Model, windows: data_mod.Windows, horizons=(3, 6, 12),
                     null_value=None, batch_size: int = 64) -> dict:
    """Per-horizon and aggregate metrics from a single T_out-step pass."""
    pred = predict_windows(model, windows, batch_size)
    true = windows.y
    report = {"aggregate": data_mod.metrics(pred, true, null_value)._asdict()}
    t_out = true.shape[1]
    for h in horizons:
        if h <= t_out:
            m = data_mod.metrics(pred[:, h - 1], true[:, h - 1], null_value)
            report[f"horizon_{h}"] = m._asdict()
    return report


def _snapshot(model: Model) -> dict:
    return {name: t.data.copy() for name, t in model.parameters().items()}


def _restore(model: Model, state: dict) -> None:
    for name, t in model.parameters().items():
        t.data[...] = state[name]


def train(config: RunConfig, bundle=None, log_fn=None):
    """Full training run; returns (model, RunLog).

    The best-validation parameter snapshot is restored into the model before
    the final test evaluation.
    """
    seed = config.resolved_seed()
    rng = np.random.default_rng(seed)
    if bundle is None:
        bundle = load_bundle(config)
    splits = data_mod.split(bundle, config.ratio, config.t_in, config.t_out)
    train_w = data_mod.make_windows(bundle, splits[0], config.t_in, config.t_out)
    val_w = data_mod.make_windows(bundle, splits[1], config.t_in, config.t_out)
    test_w = data_mod.make_windows(bundle, splits[2], config.t_in, config.t_out)
    model = ablation_build(config, bundle, rng)
    optimizer = Adam(model.trainable_parameters(), lr=config.lr)

    log_config = {k: v for k, v in asdict(config).items()}
    log_config["ratio"] = list(config.ratio)
    log_config["horizons"] = list(config.horizons)
    log_config["resolved_seed"] = seed
    runlog = RunLog(log_config)

    best_val = float("inf")
    best_state = _snapshot(model)
    best_epoch = -1
    for epoch in range(config.epochs):
        t0 = time.time()
        order = rng.permutation(len(train_w))
        losses = []
        for b, idx in enumerate(_batches(len(train_w), config.batch_size, order)):
            with GradTape() as tape:
                pred = model.forward(train_w.x[idx], train_w.slots[idx],
                                     train_w.dow[idx], rng, train_mode=True)
                loss = loss_mae(pred, train_w.y[idx], config.null_value)
                if not np.isfinite(loss.data):
                    raise RuntimeError(f"diverged: non-finite loss at epoch {epoch} batch {b}")
                tape.backward(loss)
            model.apply_key_updates()
            optimizer.step()
            optimizer.zero_grad()
            losses.append(loss.item())
        val = evaluate_windows(model, val_w, config.horizons, config.null_value,
                               config.batch_size)
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val": val["aggregate"],
            "wall_time_s": round(time.time() - t0, 3),
            "slot_counts": model.slot_counts(),
        }
        runlog.add_epoch(record)
        if log_fn:
            log_fn(f"epoch {epoch:3d}  train {record['train_loss']:.4f}  "
                   f"val mae {val['aggregate']['mae']:.4f}")
        if val["aggregate"]["mae"] < best_val:
            best_val = val["aggregate"]["mae"]
            best_state = _snapshot(model)
            best_epoch = epoch
        elif epoch - best_epoch >= config.patience:
            break
    _restore(model, best_state)
    test = evaluate_windows(model, test_w, config.horizons, config.null_value,
                            config.batch_size)
    runlog.final = {"best_epoch": best_epoch, "best_val_mae": best_val, "test": test}
    return model, runlog


def train_and_save(config: RunConfig, out_dir, log_fn=None):
    os.makedirs(out_dir, exist_ok=True)
    model, runlog = train(config, log_fn=log_fn)
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    log_path = os.path.join(out_dir, "runlog.jsonl")
    save_checkpoint(ckpt_path, model)
    runlog.save(log_path)
    return model, runlog, ckpt_path, log_path
