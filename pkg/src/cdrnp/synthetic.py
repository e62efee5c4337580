"""Two-domain rating generator with shared user latents, and its noise floor."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from .config import SynthConfig
from .data import DomainDataset, Interaction, write_ratings


@dataclass
class GroundTruth:
    user_latents: np.ndarray  # (n_users, k), row i is user "u{i}"
    src_item_latents: np.ndarray
    tgt_item_latents: np.ndarray

    def write(self, path) -> None:
        # diagnostics only; the model never reads this file
        Path(path).write_text(json.dumps({
            "user_latents": self.user_latents.tolist(),
            "src_item_latents": self.src_item_latents.tolist(),
            "tgt_item_latents": self.tgt_item_latents.tolist(),
        }), encoding="utf-8")


def _domains_of_users(cfg: SynthConfig):
    """Overlapping users first; the rest alternate source-only / target-only."""
    n_overlap = max(1, round(cfg.overlap_fraction * cfg.n_users))
    in_src = np.zeros(cfg.n_users, bool)
    in_tgt = np.zeros(cfg.n_users, bool)
    in_src[:n_overlap] = in_tgt[:n_overlap] = True
    rest = np.arange(n_overlap, cfg.n_users)
    in_src[rest[0::2]] = True
    in_tgt[rest[1::2]] = True
    return in_src, in_tgt


def generate_synthetic(cfg: SynthConfig) -> Tuple[DomainDataset, DomainDataset, GroundTruth]:
    """rating = clip(3 + theta_u . phi_v / sqrt(k) + noise), same theta_u in both domains."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    k = cfg.latent_dim
    theta = rng.standard_normal((cfg.n_users, k))
    phi_s = rng.standard_normal((cfg.n_src_items, k))
    phi_t = rng.standard_normal((cfg.n_tgt_items, k))
    in_src, in_tgt = _domains_of_users(cfg)
    scale = 1.0 / math.sqrt(k)
    clock = 0
    records = {"source": [], "target": []}
    for u in range(cfg.n_users):
        for tag, present, phi, prefix in (("source", in_src, phi_s, "s"), ("target", in_tgt, phi_t, "t")):
            if not present[u]:
                continue
            items = rng.choice(len(phi), size=cfg.ratings_per_user, replace=False)
            noise = rng.normal(0.0, cfg.noise_std, size=len(items)) if cfg.noise_std > 0 else np.zeros(len(items))
            y = np.clip(3.0 + (phi[items] @ theta[u]) * scale + noise, cfg.clip_low, cfg.clip_high)
            for v, r in zip(items, y):
                records[tag].append(Interaction(f"u{u}", f"{prefix}{v}", float(r), clock))
                clock += 1
    return (
        DomainDataset(records["source"], "source"),
        DomainDataset(records["target"], "target"),
        GroundTruth(theta, phi_s, phi_t),
    )


def write_synthetic(source: DomainDataset, target: DomainDataset, truth: GroundTruth, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"source": out / "source.csv", "target": out / "target.csv", "truth": out / "truth.json"}
    write_ratings(source, paths["source"])
    write_ratings(target, paths["target"])
    truth.write(paths["truth"])
    return paths


@dataclass
class NoiseFloor:
    analytic_unclipped: float
    monte_carlo: float
    std_error: float


def oracle_noise_mae(cfg: SynthConfig, n_draws: int = 1_000_000, seed: int = 12345) -> NoiseFloor:
    """MAE of the best possible predictor, which knows every latent.

    Without clipping this is E|noise| = sigma * sqrt(2/pi). With clipping the
    median of clip(3 + s + noise) given s is clip(3 + s), so the Monte Carlo
    estimate averages |clip(3 + s + noise) - clip(3 + s)| over fresh latents.
    """
    sigma = cfg.noise_std
    analytic = sigma * math.sqrt(2.0 / math.pi)
    if sigma == 0:
        return NoiseFloor(0.0, 0.0, 0.0)
    rng = np.random.default_rng(seed)
    k = cfg.latent_dim
    s = np.einsum("ij,ij->i", rng.standard_normal((n_draws, k)), rng.standard_normal((n_draws, k))) / math.sqrt(k)
    noise = rng.normal(0.0, sigma, size=n_draws)
    lo, hi = cfg.clip_low, cfg.clip_high
    err = np.abs(np.clip(3.0 + s + noise, lo, hi) - np.clip(3.0 + s, lo, hi))
    return NoiseFloor(analytic, float(err.mean()), float(err.std(ddof=1) / math.sqrt(n_draws)))


def ridge_transfer_mae(source: DomainDataset, target: DomainDataset, truth: GroundTruth,
                       train_users, test_users, ridge: float = 1.0) -> float:
    """Learnability check computed from ground-truth item latents.

    Each user is summarised by the mean of (rating - 3) * phi_v over their
    source ratings, an estimate of theta_u / sqrt(k). Target ratings are then
    regressed on outer(summary, phi_v) with a closed-form ridge fit on the
    train users and scored (MAE) on the test users.
    """
    k = truth.user_latents.shape[1]

    def summary(ext):
        sl = source.user_slice(source.user_index[ext])
        ids = [int(source.item_ids[v][1:]) for v in source.items[sl]]
        return ((source.ratings[sl] - 3.0)[:, None] * truth.src_item_latents[ids]).mean(axis=0)

    def design(users):
        rows, ys = [], []
        for ext in users:
            m = summary(ext)
            sl = target.user_slice(target.user_index[ext])
            ids = [int(target.item_ids[v][1:]) for v in target.items[sl]]
            feats = np.einsum("i,nj->nij", m, truth.tgt_item_latents[ids]).reshape(len(ids), k * k)
            rows.append(np.hstack([feats, np.ones((len(ids), 1))]))
            ys.append(target.ratings[sl])
        return np.vstack(rows), np.concatenate(ys)

    X, y = design(train_users)
    reg = ridge * np.eye(X.shape[1])
    reg[-1, -1] = 0.0
    w = np.linalg.solve(X.T @ X + reg, X.T @ y)
    Xt, yt = design(test_users)
    return float(np.abs(Xt @ w - yt).mean())
