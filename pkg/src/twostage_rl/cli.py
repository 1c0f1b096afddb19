"""Command-line entry point: ``twostage-rl {train,compare,variance,score}``.

Every run that takes ``--out`` writes a ``manifest.json`` describing the run
before any other output file. Results are computed in memory first, so a
failing run leaves only what it managed to finish, never a partial file.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, TrainConfig, VarianceConfig
from .metrics import score_line
from .policy import PolicyParams, Vocab, make_cipher_instance, make_task
from .trainer import compare, lambda_sweep, rows_to_csv, train
from .variance import (baseline_gap_curve, constructed_policy, gradient_estimator_study,
                       mc_variance_scaling, pe_reward_fn, variance_decomposition_exact)

THREADS_ENV = "TWOSTAGE_THREADS"


def build_id() -> str:
    """``git describe``-style identifier of the source tree, or the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _iso(t: float) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def write_run(out_dir: Path, subcommand: str, config, seed, outputs: dict[str, str],
              started: float, manifest_name: str = "manifest.json") -> None:
    """Write the manifest, then each output file (name -> text)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config": config.snapshot() if config is not None else None,
        "seed": seed,
        "start_time": _iso(started),
        "end_time": _iso(time.time()),
        "artifacts": sorted(outputs),
        "build": build_id(),
    }
    (out_dir / manifest_name).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for name, text in outputs.items():
        (out_dir / name).write_text(text)


def _cmd_train(args) -> int:
    started = time.time()
    cfg = TrainConfig.load(args.config)
    res = train(cfg)
    outputs = {"log.jsonl": res.to_jsonl(), "evals.csv": res.evals_csv(),
               "theta.json": res.theta.to_json() + "\n"}
    write_run(Path(args.out), "train", cfg, cfg.seed, outputs, started)
    return 0


def _cmd_compare(args) -> int:
    started = time.time()
    cfg = TrainConfig.load(args.config)
    outputs = {"compare.csv": rows_to_csv(compare(cfg, threads=args.threads))}
    if cfg.lambda_settings:
        outputs["lambda_sweep.csv"] = rows_to_csv(
            lambda_sweep(cfg, cfg.lambda_settings, threads=args.threads))
    write_run(Path(args.out), "compare", cfg, list(cfg.seeds), outputs, started)
    return 0


def _random_theta(rng: np.random.Generator, vocab: Vocab) -> PolicyParams:
    shape = PolicyParams.zeros(vocab).table.shape
    return PolicyParams(vocab, rng.normal(size=shape))


def _variance_rows(kind: str, cfg: VarianceConfig) -> list[dict]:
    vocab = Vocab(cfg.vocab_size)
    if kind == "gap":
        insts = make_task(np.random.default_rng(cfg.seed), vocab, cfg.length, cfg.n_instances)
        theta = (constructed_policy(vocab, insts[0].cipher, cfg.sharpness)
                 if cfg.policy == "constructed" else PolicyParams.zeros(vocab))
        curve = baseline_gap_curve(theta, insts, cfg.mode, cfg.Ks or None, cfg.K_ref, cfg.seed,
                                   M=cfg.M, alpha=cfg.alpha, recipe=cfg.recipe,
                                   max_len=cfg.max_len, hard_cap=cfg.hard_cap)
        return curve.rows()
    if kind == "decomp":
        rows = []
        reward = pe_reward_fn(cfg.alpha, cfg.recipe)
        for k in range(cfg.n_configs):
            rng = np.random.default_rng([cfg.seed, k])
            theta = _random_theta(rng, vocab)
            inst = make_cipher_instance(rng, vocab, cfg.length)
            d = variance_decomposition_exact(theta, inst, reward, cfg.len0, cfg.len1)
            rows.append({"config": k, "var_total": d.var_total, "expected_within": d.expected_within,
                         "var_between": d.var_between, "residual": d.residual})
        return rows
    if kind == "scaling":
        return mc_variance_scaling([0.0, 1.0], cfg.Ns, cfg.repeats, cfg.seed,
                                   probs=[1.0 - cfg.bernoulli_p, cfg.bernoulli_p])
    if kind == "gradstudy":
        rng = np.random.default_rng(cfg.seed)
        theta = _random_theta(rng, vocab)
        inst = make_cipher_instance(rng, vocab, cfg.length)
        settings = cfg.lambda_settings or ((1.0, 1.0), (float(cfg.M), 1.0), (float(cfg.M), 0.0))
        return gradient_estimator_study(theta, inst, settings, cfg.samples, cfg.seed, N=cfg.N,
                                        M=cfg.M, cap=cfg.hard_cap, alpha=cfg.alpha,
                                        recipe=cfg.recipe, raw_rewards=cfg.raw_rewards)
    raise AssertionError(kind)


def _cmd_variance(args) -> int:
    started = time.time()
    cfg = VarianceConfig.load(args.config)
    rows = _variance_rows(args.kind, cfg)
    out = Path(args.out)
    if out.suffix == ".csv":
        # a bare CSV path: the manifest sits beside it
        write_run(out.parent, f"variance {args.kind}", cfg, cfg.seed, {out.name: rows_to_csv(rows)},
                  started, manifest_name=f"{out.stem}.manifest.json")
    else:
        write_run(out, f"variance {args.kind}", cfg, cfg.seed,
                  {f"{args.kind}.csv": rows_to_csv(rows)}, started)
    return 0


def _read_lines(path: str) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines()]


def _cmd_score(args) -> int:
    started = time.time()
    hyps, refs = _read_lines(args.hyp), _read_lines(args.ref)
    if len(hyps) != len(refs):
        raise ValueError(f"line count mismatch: {len(hyps)} hypotheses, {len(refs)} references")
    text = "".join(json.dumps(score_line(h, r), sort_keys=True) + "\n" for h, r in zip(hyps, refs))
    if args.out is None:
        sys.stdout.write(text)
    else:
        write_run(Path(args.out), "score", None, None, {"scores.jsonl": text}, started)
    return 0


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"expected an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(THREADS_ENV, "must be >= 1")
    return n


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twostage-rl",
                                description="Two-stage translate/post-edit RL experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="{train,compare,variance,score}")

    t = sub.add_parser("train", help="train one regime and log rewards and evaluations")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="output directory")

    c = sub.add_parser("compare", help="paired pegrl vs baseline_grpo runs over the config's seeds")
    c.add_argument("--config", required=True)
    c.add_argument("--out", required=True, help="output directory")
    c.add_argument("--threads", type=_positive_int, default=None,
                   help=f"worker processes (default: ${THREADS_ENV} or 1)")

    v = sub.add_parser("variance", help="variance studies")
    v.add_argument("kind", choices=["gap", "decomp", "scaling", "gradstudy"])
    v.add_argument("--config", required=True)
    v.add_argument("--out", required=True, help="CSV path or output directory")

    s = sub.add_parser("score", help="score line-aligned token files")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--out", default=None, help="output directory (default: stdout)")
    return p


_COMMANDS = {"train": _cmd_train, "compare": _cmd_compare, "variance": _cmd_variance,
             "score": _cmd_score}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "threads", 0) is None:
            args.threads = _default_threads()
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
