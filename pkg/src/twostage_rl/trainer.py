"""Weighted two-term gradient estimation and the training regimes."""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .grpo import (GrpoGroup, build_groups, direct_reward, group_advantages,
                   score_tree)
from .metrics import chrf_pp, quality_components
from .policy import (Mode, PolicyParams, TaskInstance, Trajectory, Vocab,
                     make_task, sample_batch, score_sum)
from .rng import stream_keys, uniforms
from .sampling import TrajectoryTree, hybrid_sample_many, sample_drafts

log = logging.getLogger(__name__)

EVAL_STEP = 2**40  # stream coordinate reserved for evaluation rollouts
EVAL_VIEWS = ("draft_greedy", "pe_greedy", "draft_sampled", "pe_sampled")


@dataclass
class GradientAccumulator:
    table: np.ndarray
    trajectory_count: int = 0

    @classmethod
    def like(cls, theta: PolicyParams) -> "GradientAccumulator":
        return cls(np.zeros_like(theta.table))

    def add(self, other: "GradientAccumulator", scale: float = 1.0) -> None:
        self.table += scale * other.table
        self.trajectory_count += other.trajectory_count

    def zero(self) -> None:
        self.table[:] = 0.0
        self.trajectory_count = 0

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.table))


def _tree_weights(tree: TrajectoryTree, groups: Sequence[GrpoGroup], lambda_pe: float,
                  lambda_mt: float) -> tuple[list[Trajectory], np.ndarray]:
    mt = [g for g in groups if g.kind == "mt"]
    pe = {g.index: g for g in groups if g.kind == "pe"}
    if len(mt) != 1 or len(mt[0].advantages) != tree.N or sorted(pe) != list(range(tree.N)) \
            or any(len(pe[i].advantages) != tree.M for i in range(tree.N)):
        raise ValueError("groups do not match the tree shape")
    trajs = list(tree.drafts)
    weights = [lambda_mt / tree.N * mt[0].advantages]
    for i, row in enumerate(tree.edits):
        trajs.extend(row)
        weights.append(lambda_pe / (tree.N * tree.M) * pe[i].advantages)
    return trajs, np.concatenate(weights)


def estimate_weighted_gradient(theta: PolicyParams, tree: TrajectoryTree,
                               groups: Sequence[GrpoGroup], lambda_pe: float,
                               lambda_mt: float) -> GradientAccumulator:
    """``lambda_pe/(NM) sum A_pe grad log pi(edit) + lambda_mt/N sum A_mt grad log pi(draft)``."""
    trajs, w = _tree_weights(tree, groups, lambda_pe, lambda_mt)
    return GradientAccumulator(score_sum(theta, trajs, w), len(trajs))


def single_stage_gradient(theta: PolicyParams, drafts: Sequence[Trajectory],
                          advantages: np.ndarray) -> GradientAccumulator:
    """Plain GRPO over one group of translations."""
    return GradientAccumulator(score_sum(theta, drafts, np.asarray(advantages) / len(drafts)),
                               len(drafts))


def sgd_step(theta: PolicyParams, grad: np.ndarray | GradientAccumulator,
             learning_rate: float) -> PolicyParams:
    """Gradient ascent; a non-finite gradient is rejected."""
    g = grad.table if isinstance(grad, GradientAccumulator) else np.asarray(grad)
    if g.shape != theta.table.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient, step rejected")
    return theta.with_table(theta.table + learning_rate * g)


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    theta: PolicyParams | None = None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def evals_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "view", "chrf_pp", "proxy", "quality_f"])
        for row in self.evals:
            w.writerow([row["step"], row["view"], repr(row["chrf_pp"]), repr(row["proxy"]),
                        repr(row["quality_f"])])
        return buf.getvalue()

    def final(self, view: str, metric: str = "quality_f") -> float:
        last = max(r["step"] for r in self.evals)
        return next(r[metric] for r in self.evals if r["step"] == last and r["view"] == view)


def build_task(config: TrainConfig) -> tuple[list[TaskInstance], list[TaskInstance]]:
    """Training and held-out instances, all sharing one cipher."""
    rng = np.random.default_rng(config.seed)
    insts = make_task(rng, Vocab(config.vocab_size), config.length, config.n_train + config.n_eval)
    return insts[: config.n_train], insts[config.n_train:]


def _view_scores(outputs: Sequence[Trajectory], instances: Sequence[TaskInstance], recipe) -> dict:
    chrf, proxy, qual = [], [], []
    for out, inst in zip(outputs, instances):
        semantic, surface = quality_components(out.tokens, inst.tgt, recipe)
        chrf.append(chrf_pp(out.tokens, inst.tgt).value)
        proxy.append(semantic)
        qual.append(semantic + surface)
    return {"chrf_pp": float(np.mean(chrf)), "proxy": float(np.mean(proxy)), "quality_f": float(np.mean(qual))}


def evaluate(theta: PolicyParams, instances: Sequence[TaskInstance], config: TrainConfig) -> dict:
    """Frozen-policy scores for draft-only and post-edited outputs, greedy and sampled."""
    cap, ml = config.hard_cap, config.max_len
    drafts_g = sample_batch(theta, Mode.TRANSLATE, [(i.src,) for i in instances], None, ml, cap)
    edits_g = sample_batch(theta, Mode.POST_EDIT, [(i.src, d.tokens) for i, d in zip(instances, drafts_g)],
                           None, ml, cap)
    K = config.eval_samples
    rep = [inst for inst in instances for _ in range(K)]
    keys = stream_keys([(config.seed, EVAL_STEP, b, s, k) for b in range(len(instances))
                        for s in (0, 1) for k in range(K)]).reshape(len(instances), 2, K)
    u0 = uniforms(keys[:, 0].ravel(), cap)
    u1 = uniforms(keys[:, 1].ravel(), cap)
    drafts_s = sample_batch(theta, Mode.TRANSLATE, [(i.src,) for i in rep], u0, ml, cap)
    edits_s = sample_batch(theta, Mode.POST_EDIT, [(i.src, d.tokens) for i, d in zip(rep, drafts_s)],
                           u1, ml, cap)
    return {
        "draft_greedy": _view_scores(drafts_g, instances, config.recipe),
        "pe_greedy": _view_scores(edits_g, instances, config.recipe),
        "draft_sampled": _view_scores(drafts_s, rep, config.recipe),
        "pe_sampled": _view_scores(edits_s, rep, config.recipe),
    }


def _two_stage_step(theta, batch, ids, step, config: TrainConfig):
    trees = hybrid_sample_many(theta, batch, config.N, config.M, config.seed, step=step,
                               instance_ids=ids, max_len=config.max_len, hard_cap=config.hard_cap)
    draft_reward = "post_edit_mean" if config.regime == "pegrl" else "direct"
    lam_pe = config.resolved_lambda_pe
    trajs, weights, stats = [], [], {"draft": [], "edit": [], "gated": 0, "penalized": 0, "n": 0}
    for tree in trees:
        recs = score_tree(tree, config.alpha, config.recipe, draft_reward,
                          penalize_drafts=not config.raw_rewards)
        groups = build_groups(tree, recs, config.eps, normalize=not config.raw_rewards)
        t, w = _tree_weights(tree, groups, lam_pe, config.lambda_mt)
        trajs.extend(t)
        weights.append(w)
        stats["draft"].extend(r.reward for r in recs.drafts)
        edit_recs = [r for row in recs.edits for r in row]
        stats["edit"].extend(r.reward for r in edit_recs)
        stats["gated"] += sum(r.gated for r in edit_recs)
        stats["penalized"] += sum(d.over_budget for d in tree.drafts) + sum(r.penalized for r in edit_recs)
        stats["n"] += tree.size
    grad = score_sum(theta, trajs, np.concatenate(weights) / len(trees))
    return grad, {
        "mean_draft_reward": float(np.mean(stats["draft"])),
        "mean_edit_reward": float(np.mean(stats["edit"])),
        "gated_fraction": stats["gated"] / len(stats["edit"]),
        "penalty_fraction": stats["penalized"] / stats["n"],
        "trajectories": stats["n"],
    }


def _baseline_step(theta, batch, ids, step, config: TrainConfig):
    K = config.baseline_group_size
    drafts = sample_drafts(theta, batch, K, config.seed, step=step, instance_ids=ids,
                           max_len=config.max_len, hard_cap=config.hard_cap)
    trajs, weights, rewards, penalized = [], [], [], 0
    for inst, ds in zip(batch, drafts):
        recs = [direct_reward(d.tokens, inst.tgt, config.recipe, d.over_budget) for d in ds]
        r = np.array([x.reward for x in recs])
        adv = r if config.raw_rewards else group_advantages(r, config.eps)
        trajs.extend(ds)
        weights.append(config.lambda_mt * adv / K)
        rewards.extend(r)
        penalized += sum(x.penalized for x in recs)
    grad = score_sum(theta, trajs, np.concatenate(weights) / len(batch))
    return grad, {
        "mean_draft_reward": float(np.mean(rewards)),
        "mean_edit_reward": None,
        "gated_fraction": 0.0,
        "penalty_fraction": penalized / len(rewards),
        "trajectories": len(rewards),
    }


def train(config: TrainConfig, instances: Sequence[TaskInstance] | None = None,
          eval_instances: Sequence[TaskInstance] | None = None,
          theta: PolicyParams | None = None) -> TrainingLog:
    """Run one regime for ``config.steps`` updates and return the log (with final theta)."""
    config.validate()
    if instances is None or eval_instances is None:
        default_train, default_eval = build_task(config)
        instances = default_train if instances is None else instances
        eval_instances = default_eval if eval_instances is None else eval_instances
    if not instances:
        raise ValueError("need at least one training instance")
    theta = PolicyParams.zeros(Vocab(config.vocab_size), config.copy_bias) if theta is None else theta.copy()
    step_fn = _baseline_step if config.regime == "baseline_grpo" else _two_stage_step
    out = TrainingLog()
    n = len(instances)
    for step in range(config.steps):
        ids = [(step * config.batch_size + b) % n for b in range(config.batch_size)]
        batch = [instances[k] for k in ids]
        grad, stats = step_fn(theta, batch, ids, step, config)
        theta = sgd_step(theta, grad, config.learning_rate)
        record = {"step": step + 1, **stats, "grad_norm": float(np.linalg.norm(grad)), "eval_scores": None}
        if eval_instances and ((step + 1) % config.eval_interval == 0 or step + 1 == config.steps):
            scores = evaluate(theta, eval_instances, config)
            record["eval_scores"] = scores
            out.evals.extend({"step": step + 1, "view": v, **scores[v]} for v in EVAL_VIEWS)
            log.debug("step %d %s", step + 1, scores["pe_sampled"])
        out.records.append(record)
    out.theta = theta
    return out


def _final_scores(config: TrainConfig) -> dict:
    res = train(config)
    return {view: res.final(view) for view in EVAL_VIEWS}


def run_many(configs: Sequence[TrainConfig], threads: int = 1) -> list[dict]:
    """Final evaluation scores of independent runs, optionally in worker processes."""
    if threads > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_final_scores, configs))
    return [_final_scores(c) for c in configs]


def compare(config: TrainConfig, seeds: Sequence[int] | None = None, threads: int = 1) -> list[dict]:
    """Paired pegrl vs baseline_grpo runs on shared seeds."""
    seeds = list(config.seeds if seeds is None else seeds)
    arms = [config.replace(regime="pegrl", seed=s) for s in seeds] + \
           [config.replace(regime="baseline_grpo", seed=s) for s in seeds]
    res = run_many(arms, threads)
    ours, base = res[: len(seeds)], res[len(seeds):]
    rows = []
    for s, o, b in zip(seeds, ours, base):
        rows.append({
            "seed": s,
            "pegrl_pe_quality": o["pe_sampled"],
            "pegrl_draft_quality": o["draft_sampled"],
            "baseline_quality": b["draft_sampled"],
            "pegrl_pe_greedy": o["pe_greedy"],
            "pegrl_draft_greedy": o["draft_greedy"],
            "baseline_greedy": b["draft_greedy"],
            "delta_pe": o["pe_sampled"] - b["draft_sampled"],
            "delta_draft": o["draft_sampled"] - b["draft_sampled"],
        })
    return rows


def lambda_sweep(config: TrainConfig, settings: Sequence[tuple[float, float]],
                 seeds: Sequence[int] | None = None, threads: int = 1) -> list[dict]:
    """Final pegrl scores for each ``(lambda_pe, lambda_mt)`` and seed."""
    seeds = list(config.seeds if seeds is None else seeds)
    grid = [(lp, lm, s) for lp, lm in settings for s in seeds]
    res = run_many([config.replace(regime="pegrl", lambda_pe=lp, lambda_mt=lm, seed=s)
                    for lp, lm, s in grid], threads)
    return [{"lambda_pe": lp, "lambda_mt": lm, "seed": s, "pe_quality": r["pe_sampled"],
             "draft_quality": r["draft_sampled"]} for (lp, lm, s), r in zip(grid, res)]


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()
