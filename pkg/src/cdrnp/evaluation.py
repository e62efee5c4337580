"""Cold-start evaluation, the mean-rating baseline and per-user ranking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ContractError
from .config import TrainingConfig
from .data import CrossDomainSplit, DataError, DomainDataset, build_history
from .model import ModelParams, predict
from .tasks import RatingExample, Task, TaskBuilder


class EvaluationError(DataError):
    pass


def compute_metrics(predictions, targets) -> Tuple[float, float]:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape or p.size == 0:
        raise ContractError(f"need equal non-empty inputs, got {p.shape} and {y.shape}")
    err = p - y
    return float(np.abs(err).mean()), float(np.sqrt((err * err).mean()))


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    n_examples: int
    n_users: int
    n_skipped_users: int
    config_hash: str
    seed: int
    macro_mae: float = float("nan")
    macro_rmse: float = float("nan")
    label: str = "cdrnp"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def table(self) -> str:
        return (
            f"{'model':<16}{'MAE':>10}{'RMSE':>10}{'macroMAE':>10}{'macroRMSE':>11}{'examples':>10}{'users':>7}\n"
            f"{self.label:<16}{self.mae:>10.4f}{self.rmse:>10.4f}{self.macro_mae:>10.4f}"
            f"{self.macro_rmse:>11.4f}{self.n_examples:>10d}{self.n_users:>7d}"
        )


def user_rng(seed: int, position: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 3, position]))


def _aggregate(per_user: List[Tuple[np.ndarray, np.ndarray]], skipped: int, config_hash: str, seed: int,
               label: str) -> MetricsReport:
    if not per_user:
        raise EvaluationError("every test user was skipped; nothing to score")
    preds = np.concatenate([p for p, _ in per_user])
    ys = np.concatenate([y for _, y in per_user])
    mae, rmse = compute_metrics(preds, ys)
    per = [compute_metrics(p, y) for p, y in per_user]
    return MetricsReport(
        mae=mae,
        rmse=rmse,
        n_examples=int(ys.size),
        n_users=len(per_user),
        n_skipped_users=skipped,
        config_hash=config_hash,
        seed=seed,
        macro_mae=float(np.mean([m for m, _ in per])),
        macro_rmse=float(np.mean([r for _, r in per])),
        label=label,
    )


def testing_tasks(builder: TaskBuilder, seed: int):
    """Yield (user, task or None) for each test user in sorted order."""
    for pos, user in enumerate(builder.split.test_users):
        yield user, builder.build_testing_task(user, user_rng(seed, pos))


def evaluate(params: ModelParams, split: CrossDomainSplit, source: DomainDataset, target: DomainDataset,
             cfg: TrainingConfig, seed: Optional[int] = None, config_hash: str = "",
             builder: Optional[TaskBuilder] = None, predictor: Optional[Callable] = None,
             label: str = "cdrnp") -> MetricsReport:
    """Score one testing task per cold-start user, micro-averaged over all query ratings.

    ``predictor(task) -> array`` replaces the model when given (used for baselines).
    """
    seed = cfg.seed if seed is None else seed
    if not split.test_users:
        raise EvaluationError("split has no test users")
    if builder is None:
        builder = TaskBuilder(source, target, split, cfg.history_len, cfg.support_size, cfg.query_size)
    per_user = []
    skipped = 0
    for pos, (user, task) in enumerate(testing_tasks(builder, seed)):
        if task is None:
            skipped += 1
            continue
        if predictor is None:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 4, pos]))
            preds = predict(task, params, cfg, rng)
        else:
            preds = np.asarray(predictor(task), dtype=np.float64)
        per_user.append((preds, np.array([e.rating for e in task.query])))
    return _aggregate(per_user, skipped, config_hash, seed, label)


def baseline_mean(train_ratings) -> Callable[[Task], np.ndarray]:
    """Constant predictor at the mean of the train-visible target ratings."""
    y = np.asarray(train_ratings, dtype=np.float64)
    if y.size == 0:
        raise EvaluationError("baseline needs at least one visible rating")
    mean = float(y.mean())

    def predictor(task: Task) -> np.ndarray:
        return np.full(len(task.query), mean)

    predictor.mean = mean
    return predictor


def evaluate_baseline(split, source, target, cfg: TrainingConfig, seed: Optional[int] = None,
                      config_hash: str = "") -> MetricsReport:
    builder = TaskBuilder(source, target, split, cfg.history_len, cfg.support_size, cfg.query_size)
    pred = baseline_mean(builder.train_target_ratings())
    return evaluate(None, split, source, target, cfg, seed, config_hash, builder, pred, label="mean-baseline")


def summarize_repeats(reports: Sequence[MetricsReport]) -> Dict[str, float]:
    maes = np.array([r.mae for r in reports])
    rmses = np.array([r.rmse for r in reports])
    ddof = 1 if len(reports) > 1 else 0
    return {
        "repeats": len(reports),
        "mae_mean": float(maes.mean()),
        "mae_std": float(maes.std(ddof=ddof)),
        "rmse_mean": float(rmses.mean()),
        "rmse_std": float(rmses.std(ddof=ddof)),
    }


def predict_user(params: ModelParams, user: str, candidates: Sequence[str], support: Sequence[RatingExample],
                 source: DomainDataset, target: DomainDataset, cfg: TrainingConfig) -> List[Tuple[str, float]]:
    """Rate ``candidates`` for ``user`` and return them best first.

    Duplicates are dropped keeping first occurrence; ties go to the lower
    target item index.
    """
    if user not in source.user_index:
        raise KeyError(f"user {user!r} has no source history")
    hist = build_history(source, user, cfg.history_len).items
    seen = set()
    items = []
    for c in candidates:
        if c in seen:
            continue
        if c not in target.item_index:
            raise KeyError(f"unknown target item {c!r}")
        seen.add(c)
        items.append(target.item_index[c])
    if not items:
        return []
    s = source.user_index[user]
    query = [RatingExample(s, hist, v, None) for v in items]
    mode_cfg = cfg if cfg.test_latent_mode == "mean" else replace(cfg, test_latent_mode="mean")
    preds = predict(Task(list(support), query, "testing"), params, mode_cfg)
    order = sorted(range(len(items)), key=lambda i: (-preds[i], items[i]))
    return [(target.item_ids[items[i]], float(preds[i])) for i in order]

