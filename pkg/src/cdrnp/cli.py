"""Command-line entry point: ``cdrnp <subcommand> --config run.yaml``.

Exit codes: 0 success, 1 domain error (bad data, short pools, failed checks),
2 usage error (bad flags or config). Every run that gets past argument and
config parsing leaves a ``manifest.json`` in its output directory.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__
from .autodiff import ContractError, NumericError
from .config import ConfigError, RunConfig, SynthConfig, config_from_dict, config_hash, dump_config, load_config
from .data import DataError, compute_overlap, load_ratings, split_cold_start, write_split_manifest
from .evaluation import evaluate, evaluate_baseline, predict_user, summarize_repeats
from .synthetic import generate_synthetic, oracle_noise_mae, write_synthetic
from .tasks import TaskBuilder
from .training import TrainingError, check_model_gradients, load_checkpoint, train

log = logging.getLogger("cdrnp")

DOMAIN_ERRORS = (DataError, TrainingError, NumericError, ContractError, KeyError, OSError)
GRADCHECK_TOL = 1e-4

# used by `gradcheck` when no config is given
TINY_GRADCHECK = {
    "data": {"synth": {"n_users": 24, "n_src_items": 12, "n_tgt_items": 12, "latent_dim": 2,
                       "ratings_per_user": 6, "noise_std": 0.3, "seed": 3}},
    "split": {"alpha": 0.25, "seed": 0},
    "train": {"d": 4, "hidden": 8, "support_size": 3, "query_size": 2, "history_len": 5, "aux_batch_size": 8},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdrnp", description="Cross-domain neural process recommender.")
    parser.add_argument("--version", action="version", version=f"cdrnp {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML run configuration")
        p.add_argument("--out", help="output directory (manifest and artifacts)")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("ingest", help="load ratings, compute the overlap and the cold-start split"))
    common(sub.add_parser("synth", help="write the synthetic two-domain dataset"))
    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--resume", action="store_true", help="continue from the newest epoch checkpoint in --out")
    p = common(sub.add_parser("evaluate", help="score a checkpoint on the cold-start users"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--repeats", type=int, help="re-seed support sampling N times (default: eval.repeats)")
    p = common(sub.add_parser("predict", help="rank target items for one user"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--user", required=True, help="external user id with source history")
    p.add_argument("--items", help="comma-separated target item ids (default: every target item)")
    p.add_argument("--top", type=int, default=10)
    p = common(sub.add_parser("gradcheck", help="finite-difference check of the full loss"), config_required=False)
    p.add_argument("--eps", type=float, default=1e-5)
    return parser


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    def __init__(self, command: str, argv: List[str], config_path: Optional[str], cfg: RunConfig, out: Path):
        self.out = out
        self.record: Dict = {
            "command": command,
            "argv": list(argv),
            "config_path": config_path,
            "config_hash": config_hash(cfg),
            "seed": cfg.train.seed,
            "inputs": {},
            "outputs": {},
            "started": _now(),
            "finished": None,
            "version": __version__,
            "exit_code": None,
            "error": None,
        }
        if config_path:
            self.add_input(config_path)

    def add_input(self, path) -> None:
        self.record["inputs"][str(path)] = sha256_file(path)

    def add_output(self, path) -> None:
        self.record["outputs"][str(path)] = None

    def finish(self, code: int, error: Optional[str] = None) -> Path:
        outputs = {}
        for p in self.record["outputs"]:
            if os.path.exists(p):
                outputs[p] = sha256_file(p)
        self.record.update(outputs=outputs, finished=_now(), exit_code=code, error=error)
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / "manifest.json"
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)
        return path


def load_domains(cfg: RunConfig, manifest: RunManifest):
    data = cfg.data
    if data.source is not None:
        source = load_ratings(data.source, "source", data.min_count)
        target = load_ratings(data.target, "target", data.min_count)
        manifest.add_input(data.source)
        manifest.add_input(data.target)
        truth = None
    else:
        source, target, truth = generate_synthetic(data.synth)
    overlap, _ = compute_overlap(source, target)
    split = split_cold_start(overlap, cfg.split.alpha, cfg.split.seed)
    return source, target, truth, split


def _write_text(path: Path, text: str, manifest: RunManifest) -> None:
    path.write_text(text, encoding="utf-8")
    manifest.add_output(path)


def cmd_ingest(args, cfg, out, manifest):
    source, target, _, split = load_domains(cfg, manifest)
    overlap, source_only = compute_overlap(source, target)
    write_split_manifest(split, out / "test_users.txt")
    manifest.add_output(out / "test_users.txt")
    summary = {
        "source": {"users": source.n_users, "items": source.n_items, "ratings": len(source)},
        "target": {"users": target.n_users, "items": target.n_items, "ratings": len(target)},
        "overlap_users": len(overlap),
        "source_only_users": len(source_only),
        "train_users": len(split.train_users),
        "test_users": len(split.test_users),
    }
    _write_text(out / "ingest.json", json.dumps(summary, indent=2, sort_keys=True) + "\n", manifest)
    for k, v in summary.items():
        print(f"{k:<18}{v}")
    return 0


def cmd_synth(args, cfg, out, manifest):
    synth = cfg.data.synth or SynthConfig()
    source, target, truth = generate_synthetic(synth)
    for p in write_synthetic(source, target, truth, out).values():
        manifest.add_output(p)
    floor = oracle_noise_mae(synth)
    _write_text(out / "noise_floor.json", json.dumps(floor.__dict__, indent=2, sort_keys=True) + "\n", manifest)
    print(f"source ratings    {len(source)}\ntarget ratings    {len(target)}")
    print(f"noise floor MAE   {floor.monte_carlo:.5f} (se {floor.std_error:.5f}, unclipped {floor.analytic_unclipped:.5f})")
    return 0


def cmd_train(args, cfg, out, manifest):
    source, target, _, split = load_domains(cfg, manifest)
    dump_config(cfg, out / "config.yaml")
    manifest.add_output(out / "config.yaml")
    meta = {"config_hash": config_hash(cfg), "version": __version__}
    _, trainlog = train(cfg.train, split, source, target, out_dir=out, meta=meta, resume=args.resume)
    for name in sorted(p.name for p in out.glob("epoch*.ckpt")) + ["final.ckpt", "trainlog.jsonl"]:
        manifest.add_output(out / name)
    last = trainlog.epochs[-1]
    print(f"trained {len(trainlog.epochs)} epochs: rec={last.rec_loss:.4f} kl={last.kl_loss:.4f} "
          f"aux={last.aux_loss:.4f}")
    return 0


def _checkpoint_path(raw: str) -> Path:
    p = Path(raw)
    if not p.exists() and p.with_suffix(".ckpt").exists():
        p = p.with_suffix(".ckpt")
    if not p.exists():
        raise DataError(f"checkpoint {raw} not found")
    return p


def _load_model(args, cfg, manifest):
    ckpt = _checkpoint_path(args.checkpoint)
    manifest.add_input(ckpt)
    params, meta, _ = load_checkpoint(ckpt)
    if meta.get("config_hash") not in (None, config_hash(cfg)):
        log.warning("checkpoint was trained under config %s, evaluating with %s", meta["config_hash"],
                    config_hash(cfg))
    return params


def cmd_evaluate(args, cfg, out, manifest):
    params = _load_model(args, cfg, manifest)
    source, target, _, split = load_domains(cfg, manifest)
    repeats = args.repeats if args.repeats is not None else cfg.eval.repeats
    h = config_hash(cfg)
    reports, baselines = [], []
    for r in range(repeats):
        seed = cfg.train.seed + r
        reports.append(evaluate(params, split, source, target, cfg.train, seed=seed, config_hash=h))
        baselines.append(evaluate_baseline(split, source, target, cfg.train, seed=seed, config_hash=h))
    _write_text(out / "metrics.json", reports[0].to_json(), manifest)
    _write_text(out / "baseline.json", baselines[0].to_json(), manifest)
    print(reports[0].table())
    print(baselines[0].table().splitlines()[1])
    if repeats > 1:
        summary = {"cdrnp": summarize_repeats(reports), "mean-baseline": summarize_repeats(baselines)}
        _write_text(out / "repeats.json", json.dumps(summary, indent=2, sort_keys=True) + "\n", manifest)
        for label, s in summary.items():
            print(f"{label:<16}MAE {s['mae_mean']:.4f} +- {s['mae_std']:.4f}   "
                  f"RMSE {s['rmse_mean']:.4f} +- {s['rmse_std']:.4f}   ({repeats} runs)")
    return 0


def cmd_predict(args, cfg, out, manifest):
    import numpy as np

    params = _load_model(args, cfg, manifest)
    source, target, _, split = load_domains(cfg, manifest)
    t = cfg.train
    builder = TaskBuilder(source, target, split, t.history_len, t.support_size, t.query_size)
    support = builder.build_support(np.random.default_rng(np.random.SeedSequence([t.seed, 6])))
    items = args.items.split(",") if args.items else list(target.item_ids)
    ranking = predict_user(params, args.user, items, support, source, target, t)
    lines = [f"{item}\t{score:.6f}" for item, score in ranking]
    _write_text(out / f"predict_{args.user}.tsv", "".join(line + "\n" for line in lines), manifest)
    for line in lines[: args.top]:
        print(line)
    return 0


def cmd_gradcheck(args, cfg, out, manifest):
    t = cfg.train
    source, target, _, split = load_domains(cfg, manifest)
    result = check_model_gradients(t, split, source, target, args.eps)
    lines = [f"{name:<16}{err:.3e}" for name, err in result.per_parameter.items()]
    lines.append(f"{'max':<16}{result.max_error:.3e}  (skipped {len(result.skipped)} kink coordinates)")
    _write_text(out / "gradcheck.txt", "\n".join(lines) + "\n", manifest)
    print("\n".join(lines))
    bad = [name for name, err in result.per_parameter.items() if err > GRADCHECK_TOL]
    if bad:
        name, idx, ana, num = result.worst
        print(f"gradient check failed: {name}[{idx}] analytic {ana:.6e} vs numeric {num:.6e}", file=sys.stderr)
        print(f"offending parameters: {', '.join(bad)}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def _resolve_config(args) -> RunConfig:
    if args.config is None:
        cfg = config_from_dict(TINY_GRADCHECK)
    else:
        try:
            cfg = load_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    if args.command == "gradcheck":
        if not 1e-6 <= args.eps <= 1e-4:
            raise UsageError(f"--eps must lie in [1e-6, 1e-4], got {args.eps}")
        t = cfg.train
        if t.d > 8 or t.support_size > 8 or t.query_size > 8:
            raise UsageError("gradcheck needs train.d <= 8 and support/query sizes <= 8")
    if args.command == "evaluate" and args.repeats is not None and args.repeats < 1:
        raise UsageError("--repeats must be positive")
    return cfg


def _default_out(args) -> Path:
    if args.out:
        return Path(args.out)
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint).parent
    return Path("runs") / args.command


def run(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"cdrnp: config error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    out = _default_out(args)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(args.command, argv, args.config, cfg, out)
    try:
        code = COMMANDS[args.command](args, cfg, out, manifest)
        manifest.finish(code)
        return code
    except DOMAIN_ERRORS as exc:
        msg = f"{type(exc).__name__}: {exc}"
        print(f"cdrnp: {msg}", file=sys.stderr)
        manifest.finish(1, msg)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
