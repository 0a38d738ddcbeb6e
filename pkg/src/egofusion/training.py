"""Joint optimization of the depth and pose networks.

Batches are drawn from a permutation seeded by ``(seed, epoch)``, so a run
resumed from a checkpoint visits exactly the snippets the uninterrupted run
would have visited.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Sequence, build_snippets
from .losses import LossWeights, total_loss
from .networks import EgoMotionModel
from .tensor import NonFiniteError, Tensor, no_grad
from .tensor.core import config, set_deterministic

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_TERMS = ("photometric", "geometric", "smoothness", "regularizer", "total")


class TrainingDiverged(NonFiniteError):
    pass


class CheckpointError(Exception):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 12
    epochs: int = 40
    lr_initial: float = 1e-4
    lr_after: float = 5e-5
    lr_switch_epoch: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    deterministic: bool = False
    max_steps: int | None = None
    checkpoint_every: int = 1
    joint_mean: bool = False
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0 <= self.lr_switch_epoch <= self.epochs:
            raise ValueError("lr_switch_epoch must lie within [0, epochs]")
        if not (self.lr_initial > 0 and self.lr_after > 0):
            raise ValueError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam hyper-parameters")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be positive")

    def lr_at(self, epoch):
        return self.lr_initial if epoch < self.lr_switch_epoch else self.lr_after

    def as_dict(self):
        return asdict(self)


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8):
    """In-place bias-corrected Adam update; parameters with a ``None`` gradient are left alone.

    ``params`` are Parameters (keyed in the state by their ``name``) or a
    dict of name -> array.
    """
    items = list(params.items()) if isinstance(params, dict) else [(p.name, p) for p in params]
    if len(items) != len(grads):
        raise ValueError(f"{len(items)} parameters but {len(grads)} gradients")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for (name, p), g in zip(items, grads):
        if g is None:
            continue
        data = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        if g.shape != data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- data ---------------------------------------------------------------------

class SnippetDataset:
    """Stacked frames of one sequence and its (t-1, t, t+1) snippets."""

    def __init__(self, sequence: Sequence):
        self.sequence = sequence
        self.frames = np.stack(sequence.frames).astype(config.dtype)
        self.snippets = build_snippets(sequence.frames)
        self.intrinsics = sequence.intrinsics

    def __len__(self):
        return len(self.snippets)

    def batches(self, batch_size, seed, epoch):
        order = np.random.default_rng([seed, epoch]).permutation(len(self.snippets))
        targets = np.array([self.snippets[i].target for i in order])
        return [targets[i:i + batch_size] for i in range(0, len(targets), batch_size)]

    def batch_tensors(self, targets):
        f = self.frames
        return Tensor(f[targets - 1]), Tensor(f[targets]), Tensor(f[targets + 1])


# -- steps and epochs ---------------------------------------------------------

def train_step(model: EgoMotionModel, dataset: SnippetDataset, targets, cfg: TrainConfig,
               state: AdamState, lr):
    model.train()
    prev, tgt, nxt = dataset.batch_tensors(targets)
    out, _ = model.snippet_outputs(prev, tgt, nxt, dataset.intrinsics)
    loss, terms = total_loss(out, cfg.weights, cfg.joint_mean)
    if not math.isfinite(terms["total"]):
        raise TrainingDiverged(f"non-finite loss at step {state.step + 1}: {terms}")
    model.zero_grad()
    loss.backward()
    params = model.parameters()
    adam_step(params, [p.grad for p in params], state, lr, (cfg.beta1, cfg.beta2), cfg.eps)
    counts = model.pose.diagnostics.get("exchange_counts", [])
    terms["exchanged_rgb"] = sum(c[0] for c in counts)
    terms["exchanged_depth"] = sum(c[1] for c in counts)
    return terms


def dataset_loss(model: EgoMotionModel, dataset: SnippetDataset, cfg: TrainConfig, batch_size=None):
    """Snippet-weighted mean of every loss term over the whole dataset.

    Evaluated with batch statistics, as in training, but without gradients;
    the BN running buffers are restored afterwards so the call has no side
    effects on the model.
    """
    saved = {k: b.copy() for k, b in model.named_buffers()}
    was_training = model.training
    model.train()
    targets = np.array([s.target for s in dataset.snippets])
    bs = batch_size or cfg.batch_size
    sums = dict.fromkeys(LOSS_TERMS, 0.0)
    try:
        with no_grad():
            for i in range(0, len(targets), bs):
                chunk = targets[i:i + bs]
                out, _ = model.snippet_outputs(*dataset.batch_tensors(chunk), dataset.intrinsics)
                _, terms = total_loss(out, cfg.weights, cfg.joint_mean)
                for k in LOSS_TERMS:
                    sums[k] += terms[k] * len(chunk)
    finally:
        for k, b in model.named_buffers():
            b[...] = saved[k]
        model.train(was_training)
    return {k: v / len(targets) for k, v in sums.items()}


@dataclass
class EpochMetrics:
    epoch: int
    steps: int
    lr: float
    losses: dict
    exchanged_rgb: float
    exchanged_depth: float
    exchanged_fraction: float
    gamma_hist: list
    step_losses: list = field(default_factory=list)

    def row(self):
        r = {"epoch": self.epoch, "steps": self.steps, "lr": f"{self.lr:.6g}"}
        r.update({k: f"{self.losses[k]:.9g}" for k in LOSS_TERMS})
        r.update(exchanged_rgb=f"{self.exchanged_rgb:.6g}", exchanged_depth=f"{self.exchanged_depth:.6g}",
                 exchanged_fraction=f"{self.exchanged_fraction:.6g}",
                 gamma_hist=" ".join(str(c) for c in self.gamma_hist))
        return r


CSV_FIELDS = ["epoch", "steps", "lr", *LOSS_TERMS, "exchanged_rgb", "exchanged_depth",
              "exchanged_fraction", "gamma_hist"]


def train_epoch(model: EgoMotionModel, dataset: SnippetDataset, cfg: TrainConfig, state: AdamState,
                epoch=0, start_batch=0, step_budget=None):
    """One pass over the seeded batch order; returns running means of the step metrics."""
    lr = cfg.lr_at(epoch)
    batches = dataset.batches(cfg.batch_size, cfg.seed, epoch)[start_batch:]
    if step_budget is not None:
        batches = batches[:step_budget]
    records = [train_step(model, dataset, b, cfg, state, lr) for b in batches]
    if not records:
        raise ValueError("epoch has no batches")
    means = {k: float(np.mean([r[k] for r in records])) for k in LOSS_TERMS}
    summary = model.exchange_summary()
    return EpochMetrics(
        epoch=epoch, steps=len(records), lr=lr, losses=means,
        exchanged_rgb=float(np.mean([r["exchanged_rgb"] for r in records])),
        exchanged_depth=float(np.mean([r["exchanged_depth"] for r in records])),
        exchanged_fraction=summary.get("exchanged_fraction", 0.0),
        gamma_hist=summary.get("gamma_hist", []),
        step_losses=[r["total"] for r in records],
    )


# -- checkpoints --------------------------------------------------------------

def checkpoint_save(path, model: EgoMotionModel, state: AdamState, meta=None):
    """Write parameters, buffers and Adam moments to one ``.npz`` archive."""
    path = Path(path)
    info = {"format_version": CHECKPOINT_VERSION, "model": model.config_dict(),
            "adam_step": state.step, "dtype": np.dtype(config.dtype).name}
    info.update(meta or {})
    arrays = {"meta": np.frombuffer(json.dumps(info, sort_keys=True).encode(), dtype=np.uint8)}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.data
    for name, b in model.named_buffers():
        arrays[f"buffer/{name}"] = b
    for name, m in state.m.items():
        arrays[f"adam_m/{name}"] = m
        arrays[f"adam_v/{name}"] = state.v[name]
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def read_checkpoint(path):
    """Return (meta, arrays) after format checks."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(bytes(arrays.pop("meta")).decode())
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format {meta.get('format_version')} != {CHECKPOINT_VERSION}")
    return meta, arrays


def checkpoint_load(path, model: EgoMotionModel, state: AdamState | None = None):
    """Restore into ``model`` (and ``state``); returns the checkpoint metadata."""
    meta, arrays = read_checkpoint(path)
    if meta["model"] != model.config_dict():
        raise CheckpointError(f"checkpoint model config {meta['model']} does not match {model.config_dict()}")
    state_dict = {}
    for key, arr in arrays.items():
        kind, name = key.split("/", 1)
        if kind in ("param", "buffer"):
            state_dict[name] = arr
    try:
        model.load_state_dict(state_dict)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from None
    if state is not None:
        state.step = int(meta["adam_step"])
        state.m = {k.split("/", 1)[1]: a.copy() for k, a in arrays.items() if k.startswith("adam_m/")}
        state.v = {k.split("/", 1)[1]: a.copy() for k, a in arrays.items() if k.startswith("adam_v/")}
    return meta


def model_from_checkpoint(path):
    """Rebuild the model described by a checkpoint and load its weights."""
    from .networks import DepthNetConfig, PoseNetConfig

    meta, _ = read_checkpoint(path)
    d, p = meta["model"]["depth"], meta["model"]["pose"]
    model = EgoMotionModel(
        DepthNetConfig(tuple(d["encoder_channels"]), tuple(d["decoder_channels"]), d["num_scales"],
                       d["min_depth"], d["max_depth"]),
        PoseNetConfig(p["strategy"], tuple(p["widths"]), tuple(p["blocks"]), p["ce_threshold"],
                      tuple(p["regressor_hidden"]), p["output_scale"], p["normalize_depth"]),
        seed=meta.get("seed", 0))
    checkpoint_load(path, model)
    return model, meta


# -- full runs ----------------------------------------------------------------

@dataclass
class TrainResult:
    epochs: list
    state: AdamState
    steps: int

    @property
    def step_losses(self):
        return [x for e in self.epochs for x in e.step_losses]


def _schedule_dict(cfg: TrainConfig):
    # everything except the step cap, which may differ between the halves of a split run
    d = cfg.as_dict()
    d.pop("max_steps")
    return d


def _append_csv(path, metrics: EpochMetrics):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow(metrics.row())


def train(model: EgoMotionModel, dataset: SnippetDataset, cfg: TrainConfig, run_dir=None,
          resume=None, extra_meta=None) -> TrainResult:
    """Run the schedule, optionally writing a run directory and resuming from a checkpoint.

    An epoch cut short by ``max_steps`` is checkpointed mid-way; resuming
    continues from the next batch of that epoch.
    """
    set_deterministic(cfg.deterministic)
    state = AdamState()
    epoch, batch, steps = 0, 0, 0
    if resume is not None:
        meta = checkpoint_load(resume, model, state)
        if meta.get("train") is not None and meta["train"] != json.loads(json.dumps(_schedule_dict(cfg))):
            raise CheckpointError("checkpoint was written under a different training config")
        epoch, batch, steps = meta["epoch"], meta["batch"], meta["steps"]
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    history = []
    n_batches = len(dataset.batches(cfg.batch_size, cfg.seed, 0))
    while epoch < cfg.epochs and (cfg.max_steps is None or steps < cfg.max_steps):
        budget = None if cfg.max_steps is None else cfg.max_steps - steps
        metrics = train_epoch(model, dataset, cfg, state, epoch, batch, budget)
        steps += metrics.steps
        batch += metrics.steps
        finished = batch >= n_batches
        log.info("epoch %d step %d loss %.6f", epoch, steps, metrics.losses["total"])
        history.append(metrics)
        if finished:
            epoch, batch = epoch + 1, 0
        if run_dir is not None:
            _append_csv(run_dir / "epochs.csv", metrics)
            meta = {"epoch": epoch, "batch": batch, "steps": steps, "train": _schedule_dict(cfg)}
            meta.update(extra_meta or {})
            checkpoint_save(run_dir / "checkpoints" / "last.npz", model, state, meta)
            if finished and epoch % cfg.checkpoint_every == 0:
                checkpoint_save(run_dir / "checkpoints" / f"epoch_{epoch:04d}.npz", model, state, meta)
    return TrainResult(history, state, steps)
