"""Normalisation, loss, Adam, training loop, evaluation and sensitivity maps."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .model import GraphInputs, ModelConfig, TwoLevelMGN

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
STD_FLOOR = 1e-8

# named sub-streams so that every consumer of the run seed is independent
STREAMS = {"split": 1, "init": 2, "shuffle": 3, "coarsen": 4}


def stream_seed(seed: int, name: str, *extra: int) -> list[int]:
    return [int(seed), STREAMS[name], *map(int, extra)]


class NumericalError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------- normalizer

@dataclass
class Normalizer:
    load_mean: np.ndarray
    load_std: np.ndarray
    edge_mean: np.ndarray
    edge_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    def normalize_output(self, y: np.ndarray) -> np.ndarray:
        return (y - self.out_mean) / self.out_std

    def denormalize_output(self, y: np.ndarray) -> np.ndarray:
        return y * self.out_std + self.out_mean

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in
                      ("load_mean", "load_std", "edge_mean", "edge_std", "out_mean", "out_std")})


def _stats(blocks: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate(blocks, axis=0)
    return x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR)


def fit_normalizer(train: Sequence[GraphInputs]) -> Normalizer:
    """Channel statistics pooled over all nodes/edges of the training samples."""
    if not train:
        raise ValueError("cannot fit a normalizer on an empty training split")
    if any(s.response is None for s in train):
        raise ValueError("training samples must carry a response")
    lm, ls = _stats([s.loads for s in train])
    em, es = _stats([s.edge_raw for s in train])
    om, os_ = _stats([s.response for s in train])
    return Normalizer(lm, ls, em, es, om, os_)


# ------------------------------------------------------------------- loss

def l2_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over the nodes and channels of one sample."""
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"l2_loss: prediction {pred.shape} vs target {target.shape}")
    return ad.mean(ad.square(ad.sub(pred, target)))


# ------------------------------------------------------------------- adam

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update applied in place, in parameter-dict order."""
    for name, p in params.items():
        if p.grad is None or not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite or missing gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: TwoLevelMGN, normalizer: Normalizer, state: AdamState | None = None,
                    extra: dict | None = None) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": {n: {"shape": list(p.shape), "data": p.data.ravel().tolist()} for n, p in model.params.items()},
        "normalizer": normalizer.to_dict(),
    }
    if state is not None:
        doc["optimizer"] = {
            "step": state.step,
            "m": {n: a.ravel().tolist() for n, a in state.m.items()},
            "v": {n: a.ravel().tolist() for n, a in state.v.items()},
        }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    """Return ``(model, normalizer, adam_state_or_None, extra)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format_version {doc.get('format_version')!r}")
    cfg = ModelConfig(**doc["config"])
    params = {}
    for name, entry in doc["params"].items():
        data = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if data.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: parameter {name} has {data.size} values for shape {shape}")
        params[name] = Tensor(data.reshape(shape), requires_grad=True, name=name)
    try:
        model = TwoLevelMGN(cfg, params)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    state = None
    if "optimizer" in doc:
        o = doc["optimizer"]
        state = AdamState(
            o["step"],
            {n: np.asarray(a).reshape(model.params[n].shape) for n, a in o["m"].items()},
            {n: np.asarray(a).reshape(model.params[n].shape) for n, a in o["v"].items()},
        )
    return model, Normalizer.from_dict(doc["normalizer"]), state, doc.get("extra", {})


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = 1000
    eval_every: int = 100
    seed: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.max_steps < 0 or self.eval_every < 1:
            raise ValueError("max_steps must be >= 0 and eval_every >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: TwoLevelMGN
    normalizer: Normalizer
    state: AdamState
    metrics: list[dict]
    best_val: float
    best_step: int
    train_losses: list[float]


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(stream_seed(seed, "shuffle", epoch)).permutation(n)


def train_step(model: TwoLevelMGN, inp: GraphInputs, normalizer: Normalizer, state: AdamState,
               cfg: TrainConfig) -> float:
    for p in model.parameters():
        p.zero_grad()
    target = normalizer.normalize_output(inp.response)
    with Tape() as tape:
        loss = l2_loss(model.forward(inp, normalizer), target)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss on sample {inp.name!r}")
        tape.backward(loss)
    try:
        adam_step(model.params, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    except NumericalError as exc:
        raise NumericalError(f"{exc} (sample {inp.name!r})") from None
    return value


def normalized_mse(model: TwoLevelMGN, samples: Sequence[GraphInputs], normalizer: Normalizer) -> float:
    vals = [float(np.mean((model.forward(s, normalizer).data - normalizer.normalize_output(s.response)) ** 2))
            for s in samples]
    return float(np.mean(vals))


def train(model: TwoLevelMGN, train_set: Sequence[GraphInputs], val_set: Sequence[GraphInputs],
          cfg: TrainConfig, normalizer: Normalizer | None = None, state: AdamState | None = None,
          best_val: float = float("inf"), best_step: int = -1) -> TrainResult:
    """One sample per Adam step in a seeded per-epoch order.

    Validation MSE (physical units) is computed every ``eval_every`` steps
    and after the last step. With ``checkpoint_dir`` set, ``best.json``
    tracks the best validation checkpoint, ``last.json`` the final state and
    ``metrics.csv`` the log. Passing a restored ``state`` resumes training
    at ``state.step``.
    """
    if normalizer is None:
        normalizer = fit_normalizer(train_set)
    state = state or AdamState()
    out = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics: list[dict] = []
    losses: list[float] = []
    window: list[float] = []
    n = len(train_set)
    order = None
    epoch = -1
    start = state.step
    for step in range(start, cfg.max_steps):
        e, pos = divmod(step, n)
        if e != epoch:
            epoch, order = e, _epoch_order(cfg.seed, e, n)
        inp = train_set[order[pos]]
        value = train_step(model, inp, normalizer, state, cfg)
        losses.append(value)
        window.append(value)
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.max_steps:
            val = evaluate_mse(model, val_set, normalizer)["mean"] if val_set else float("nan")
            row = {"step": done, "train_loss": float(np.mean(window)), "val_mse": val}
            metrics.append(row)
            window = []
            log.info("step %d train_loss %.6g val_mse %.6g", done, row["train_loss"], val)
            if val_set and val < best_val:
                best_val, best_step = val, done
                if out is not None:
                    save_checkpoint(out / "best.json", model, normalizer, state,
                                    {"step": done, "val_mse": val})
    if out is not None:
        save_checkpoint(out / "last.json", model, normalizer, state,
                        {"step": state.step, "best_val": best_val, "best_step": best_step})
        write_metrics_csv(out / "metrics.csv", metrics)
    return TrainResult(model, normalizer, state, metrics, best_val, best_step, losses)


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_loss", "val_mse"])
        for r in rows:
            w.writerow([r["step"], repr(r["train_loss"]), repr(r["val_mse"])])


# ---------------------------------------------------------------- evaluation

def evaluate_mse(model: TwoLevelMGN, samples: Sequence[GraphInputs], normalizer: Normalizer) -> dict:
    """Per-sample MSE in physical units and their arithmetic mean."""
    per = []
    for s in samples:
        if s.response is None:
            raise ValueError(f"sample {s.name!r} has no response to evaluate against")
        pred = model.predict(s, normalizer)
        per.append(float(np.mean((pred - s.response) ** 2)))
    return {"per_sample": per, "mean": float(np.mean(per)) if per else float("nan")}


def sensitivity_map(model: TwoLevelMGN, inp: GraphInputs, normalizer: Normalizer, source_node: int) -> np.ndarray:
    """Gradient norm of the summed output at ``source_node`` w.r.t. each node's load vector."""
    if not 0 <= source_node < inp.num_nodes:
        raise IndexError(f"source node {source_node} out of range for {inp.num_nodes} nodes")
    loads = Tensor(inp.loads.copy(), requires_grad=True)
    with Tape() as tape:
        out = model.forward(inp, normalizer, loads=loads)
        target = ad.sum_(out[source_node:source_node + 1, :])
        tape.backward(target)
    return np.linalg.norm(loads.grad, axis=1)


def write_sensitivity_csv(path, inp: GraphInputs, grad_mag: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "x", "y", "grad_mag"])
        for i in range(inp.num_nodes):
            x = inp.coords[i]
            w.writerow([i, repr(float(x[0])), repr(float(x[1])), repr(float(grad_mag[i]))])
