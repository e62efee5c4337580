"""Loss terms, Adam, the episodic training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import (
    ContractError,
    GradCheckResult,
    Node,
    NumericError,
    ShapeError,
    Tape,
    backward,
    gradient_check,
    parameter_grads,
)
from .config import TrainingConfig
from .data import CrossDomainSplit, DomainDataset
from .model import GaussianLatent, ModelParams, TaskLatents, forward_task
from .tasks import TaskBuilder

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def kl_diag_gaussian(tape: Tape, q: GaussianLatent, p: GaussianLatent) -> Node:
    """KL(q || p) between diagonal Gaussians given as (mu, log sigma) nodes."""
    if q.mu.shape != p.mu.shape or q.log_sigma.shape != p.log_sigma.shape:
        raise ShapeError(f"kl: q{q.mu.shape} and p{p.mu.shape} differ")
    d = q.mu.shape[0]
    log_ratio = tape.sub(p.log_sigma, q.log_sigma)
    var_ratio = tape.exp(tape.scale(log_ratio, -2.0))  # sigma_q^2 / sigma_p^2
    inv_var_p = tape.exp(tape.scale(p.log_sigma, -2.0))
    mean_term = tape.mul(tape.square(tape.sub(q.mu, p.mu)), inv_var_p)
    per_dim = tape.add(log_ratio, tape.scale(tape.add(var_ratio, mean_term), 0.5))
    return tape.add(tape.sum(per_dim), tape.const(-0.5 * d))


def task_loss(tape: Tape, predictions: Node, targets, latents: TaskLatents, lambda_: float):
    """Returns (L, L_rec, L_KL) nodes with L = L_rec + lambda * L_KL."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != predictions.shape or y.size == 0:
        raise ContractError(f"predictions{predictions.shape} and targets{y.shape} must match and be non-empty")
    if latents.posterior is None:
        raise ContractError("task_loss needs the training-phase posterior")
    rec = tape.mean(tape.square(tape.sub(predictions, tape.const(y))))
    kl = kl_diag_gaussian(tape, latents.posterior, latents.prior)
    total = tape.add(rec, tape.scale(kl, lambda_))
    return total, rec, kl


def auxiliary_source_loss(tape: Tape, users, items, ratings, params: ModelParams) -> Node:
    """MSE of a small head over [u || W_a v_s] against source-domain ratings.

    This is what trains the user embeddings of users that never appear in a
    training task.
    """
    users = np.asarray(users, dtype=np.intp)
    if users.size == 0:
        raise ContractError("auxiliary batch is empty")
    u = tape.take(params["user_emb"], users)
    v = tape.linear(params["attn_W"], tape.take(params["src_item_emb"], items))
    hidden = tape.relu(tape.linear(params["aux.W0"], tape.concat([u, v]), params["aux.b0"]))
    out = tape.reshape(tape.linear(params["aux.W1"], hidden, params["aux.b1"]), (len(users),))
    return tape.mean(tape.square(tape.sub(out, tape.const(np.asarray(ratings, dtype=np.float64)))))


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: ModelParams, state: AdamState, learning_rate: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One Adam update from the gradients held in ``params``; gradients are zeroed after."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for {p.name}")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.value -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.zero_grad()
    return state


# -- checkpoints --------------------------------------------------------------

_MAGIC = b"CDRNPCKPT1\n"


def save_checkpoint(path, params: ModelParams, meta: dict, adam: Optional[AdamState] = None) -> None:
    """Self-describing container: magic, JSON header length, header, raw float64 data.

    Written to a temporary file and renamed, so a reader never sees a torn file.
    """
    arrays = [(p.name, p.value) for p in params]
    if adam is not None:
        arrays += [(f"adam.m/{k}", v) for k, v in adam.m.items()]
        arrays += [(f"adam.v/{k}", v) for k, v in adam.v.items()]
    header = {
        "meta": meta,
        "model": {"d": params.d, "hidden": params.hidden, "depth": params.depth},
        "adam_step": adam.step if adam is not None else None,
        "n_params": len(params),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (ModelParams, meta dict, AdamState or None)."""
    from .autodiff import Parameter

    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        arrays = []
        for spec in header["arrays"]:
            count = int(np.prod(spec["shape"], dtype=np.int64))
            data = np.frombuffer(fh.read(8 * count), dtype="<f8")
            if data.size != count:
                raise ValueError(f"{path}: truncated at {spec['name']}")
            arrays.append((spec["name"], data.reshape(spec["shape"]).astype(np.float64)))
    k = header["n_params"]
    m = header["model"]
    params = ModelParams([Parameter(name, a) for name, a in arrays[:k]], m["d"], m["hidden"], m["depth"])
    adam = None
    if header["adam_step"] is not None:
        adam = AdamState(step=header["adam_step"])
        for name, a in arrays[k:]:
            kind, pname = name.split("/", 1)
            (adam.m if kind == "adam.m" else adam.v)[pname] = a.copy()
    return params, header["meta"], adam


# -- loop -----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    rec_loss: float
    kl_loss: float
    aux_loss: float
    tasks: int
    seconds: float


@dataclass
class TrainLog:
    epochs: List[EpochRecord] = field(default_factory=list)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.epochs:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "TrainLog":
        with open(path, encoding="utf-8") as fh:
            return cls([EpochRecord(**json.loads(line)) for line in fh if line.strip()])


def latest_checkpoint(out_dir) -> Optional[Path]:
    found = sorted(Path(out_dir).glob("epoch[0-9][0-9][0-9].ckpt"))
    return found[-1] if found else None


def user_rows(source: DomainDataset, target: DomainDataset) -> int:
    """Size of the shared user table: source users first (row = source index), then target-only users."""
    src = set(source.user_ids)
    return source.n_users + sum(1 for u in target.user_ids if u not in src)


def init_params(cfg: TrainingConfig, source: DomainDataset, target: DomainDataset) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    return ModelParams.init(cfg, user_rows(source, target), source.n_items, target.n_items, rng)


def default_tasks_per_epoch(cfg: TrainingConfig, builder: TaskBuilder) -> int:
    per_task = cfg.support_size + cfg.query_size
    return max(1, math.ceil(len(builder.train_pool[0]) / per_task))


def _task_gradients(task, params, cfg, rng, aux_batch, epsilon=None):
    """Forward + backward for one task; returns (param-name -> grad, loss parts)."""
    tape = Tape()
    preds, latents = forward_task(tape, task, params, "training", rng, cfg, epsilon)
    total, rec, kl = task_loss(tape, preds, [e.rating for e in task.query], latents, cfg.lambda_)
    aux_val = 0.0
    if cfg.aux_weight > 0 and aux_batch is not None:
        aux = auxiliary_source_loss(tape, *aux_batch, params)
        total = tape.add(total, tape.scale(aux, cfg.aux_weight))
        aux_val = float(aux.value)
    parts = (float(total.value), float(rec.value), float(kl.value), aux_val)
    grads = backward(tape, total, accumulate=False)
    return parameter_grads(tape, grads), parts


def train(cfg: TrainingConfig, split: CrossDomainSplit, source: DomainDataset, target: DomainDataset,
          out_dir=None, meta: Optional[dict] = None, params: Optional[ModelParams] = None,
          progress=None, resume: bool = False):
    """Episodic training; returns (ModelParams, TrainLog).

    One Adam step per task (or per group of ``workers`` tasks). With
    ``out_dir`` set, a checkpoint is written after every epoch and the log
    after every epoch; ``final.ckpt`` holds the end state. ``resume``
    continues from the newest epoch checkpoint in ``out_dir``, including the
    sampling rng, so an interrupted run finishes with the same bytes.
    """
    cfg.validate()
    builder = TaskBuilder(source, target, split, cfg.history_len, cfg.support_size, cfg.query_size)
    if params is None:
        params = init_params(cfg, source, target)
    n_tasks = cfg.tasks_per_epoch or default_tasks_per_epoch(cfg, builder)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    adam = AdamState()
    trainlog = TrainLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    first = 1
    if resume and out is not None:
        latest = latest_checkpoint(out)
        if latest is not None:
            params, saved, adam = load_checkpoint(latest)
            if adam is None or "rng" not in saved:
                raise TrainingError(f"{latest} lacks optimizer or rng state; cannot resume")
            rng.bit_generator.state = saved["rng"]
            first = saved["epoch"] + 1
            trainlog = TrainLog([r for r in TrainLog.read(out / "trainlog.jsonl").epochs if r.epoch < first])
            log.info("resuming from %s at epoch %d", latest, first)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    try:
        for epoch in range(first, cfg.epochs + 1):
            t0 = time.perf_counter()
            sums = np.zeros(3)
            done = 0
            while done < n_tasks:
                group = min(cfg.workers, n_tasks - done)
                jobs = []
                for _ in range(group):
                    task = builder.build_training_task(rng)
                    aux = None
                    if cfg.aux_weight > 0:
                        pick = rng.integers(0, len(source), size=cfg.aux_batch_size)
                        aux = (source.users[pick], source.items[pick], source.ratings[pick])
                    task_rng = np.random.default_rng(rng.integers(2**63))
                    jobs.append((task, task_rng, aux))
                if pool is None:
                    results = [_task_gradients(t, params, cfg, r, a) for t, r, a in jobs]
                else:
                    results = list(pool.map(lambda j: _task_gradients(j[0], params, cfg, j[1], j[2]), jobs))
                for k, (grads, parts) in enumerate(results):
                    if not all(math.isfinite(x) for x in parts):
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch}, task {done + k}: "
                            f"total={parts[0]} rec={parts[1]} kl={parts[2]} aux={parts[3]}"
                        )
                    for name, g in grads.items():
                        params[name].grad += g
                    sums += parts[1:]
                try:
                    optimizer_step(params, adam, cfg.learning_rate)
                except NumericError as exc:
                    raise TrainingError(f"epoch {epoch}, task {done}: {exc}") from None
                done += group
            rec = EpochRecord(epoch, *(sums / n_tasks).tolist(), tasks=n_tasks,
                              seconds=time.perf_counter() - t0)
            trainlog.epochs.append(rec)
            log.info("epoch %d: rec=%.4f kl=%.4f aux=%.4f (%.1fs)", epoch, rec.rec_loss, rec.kl_loss,
                     rec.aux_loss, rec.seconds)
            if progress is not None:
                progress(rec)
            if out is not None:
                save_checkpoint(out / f"epoch{epoch:03d}.ckpt", params,
                                {**meta, "epoch": epoch, "rng": rng.bit_generator.state}, adam)
                trainlog.write(out / "trainlog.jsonl")
    finally:
        if pool is not None:
            pool.shutdown()
    if out is not None:
        save_checkpoint(out / "final.ckpt", params, {**meta, "epoch": cfg.epochs}, adam)
    return params, trainlog


def check_model_gradients(cfg: TrainingConfig, split: CrossDomainSplit, source: DomainDataset,
                          target: DomainDataset, eps: float = 1e-5) -> GradCheckResult:
    """Finite-difference check of the full training loss (task loss plus auxiliary term).

    One training task and one auxiliary batch are drawn from ``cfg.seed`` and
    the latent noise is frozen, so every evaluation sees the same function.
    """
    if cfg.d > 8 or cfg.support_size > 8 or cfg.query_size > 8:
        raise ValueError("gradient check needs d <= 8 and support/query sizes <= 8")
    builder = TaskBuilder(source, target, split, cfg.history_len, cfg.support_size, cfg.query_size)
    params = init_params(cfg, source, target)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5]))
    task = builder.build_training_task(rng)
    pick = rng.integers(0, len(source), size=min(cfg.aux_batch_size, 8))
    aux = (source.users[pick], source.items[pick], source.ratings[pick])
    epsilon = rng.standard_normal(cfg.d)

    def loss():
        tape = Tape()
        preds, latents = forward_task(tape, task, params, "training", None, cfg, epsilon)
        total, _, _ = task_loss(tape, preds, [e.rating for e in task.query], latents, cfg.lambda_)
        return tape.add(total, tape.scale(auxiliary_source_loss(tape, *aux, params), max(cfg.aux_weight, 1.0)))

    return gradient_check(loss, list(params), eps)
