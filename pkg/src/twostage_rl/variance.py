"""Variance studies: baseline-gap curves, exact total-variance decompositions,
Monte Carlo scaling, and sampled-vs-exact gradient estimator comparisons."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import softmax

from .grpo import (DEFAULT_ALPHA, build_groups, direct_reward, mt_reward, pe_reward,
                   score_tree)
from .metrics import Recipe
from .policy import (DEFAULT_BUDGET, Mode, PolicyParams, TaskInstance, Vocab,
                     _steps, enumerate_support, exact_gradient_terms)
from .sampling import TrajectoryTree, hybrid_sample_many, sample_drafts, sample_edits
from .trainer import _tree_weights, estimate_weighted_gradient


def default_Ks(K_ref: int) -> list[int]:
    Ks = [1 << p for p in range(K_ref.bit_length()) if (1 << p) <= K_ref]
    return Ks if Ks[-1] == K_ref else Ks + [K_ref]


@dataclass
class GapCurve:
    Ks: np.ndarray
    mean_gap: np.ndarray
    std_gap: np.ndarray
    K_ref: int
    mode: str
    gaps: np.ndarray        # (instances, len(Ks))
    reward_std: float       # root-mean per-instance reward variance

    def slope(self, max_K: int | None = None) -> float:
        """Least-squares slope of log std_gap against log K.

        By default only ``K <= K_ref / 4`` enters the fit; closer to ``K_ref``
        the shared reference pulls the gap below ``sigma / sqrt(K)``.
        """
        max_K = self.K_ref // 4 if max_K is None else max_K
        keep = (self.Ks <= max_K) & (self.std_gap > 0)
        if keep.sum() < 2:
            raise ValueError("need at least two positive points to fit a slope")
        return float(np.polyfit(np.log(self.Ks[keep]), np.log(self.std_gap[keep]), 1)[0])

    def rows(self) -> list[dict]:
        return [{"K": int(k), "mean_gap": float(m), "std_gap": float(s), "mode": self.mode}
                for k, m, s in zip(self.Ks, self.mean_gap, self.std_gap)]


def _mode_rewards(theta, inst, iid, mode, K_ref, M, seed, alpha, recipe, max_len, hard_cap):
    if mode == "translate":
        drafts = sample_drafts(theta, [inst], K_ref, seed, instance_ids=[iid],
                               max_len=max_len, hard_cap=hard_cap)[0]
        return np.array([direct_reward(d.tokens, inst.tgt, recipe, d.over_budget).reward for d in drafts])
    if mode == "post_edit":
        draft = sample_drafts(theta, [inst], 1, seed, instance_ids=[iid],
                              max_len=max_len, hard_cap=hard_cap)[0][0]
        edits = sample_edits(theta, [inst], [[draft]], K_ref, seed, instance_ids=[iid],
                             max_len=max_len, hard_cap=hard_cap)[0][0]
        return np.array([pe_reward(inst.src, draft.tokens, e.tokens, inst.tgt, alpha, recipe,
                                   e.over_budget).reward for e in edits])
    if mode == "avg_translate":
        drafts = sample_drafts(theta, [inst], K_ref, seed, instance_ids=[iid],
                               max_len=max_len, hard_cap=hard_cap)[0]
        edits = sample_edits(theta, [inst], [drafts], M, seed, instance_ids=[iid],
                             max_len=max_len, hard_cap=hard_cap)[0]
        out = []
        for d, row in zip(drafts, edits):
            recs = [pe_reward(inst.src, d.tokens, e.tokens, inst.tgt, alpha, recipe, e.over_budget)
                    for e in row]
            out.append(mt_reward(d, recs).reward)
        return np.array(out)
    raise ValueError(f"unknown mode {mode!r}")


def baseline_gap_curve(theta: PolicyParams, instances: Sequence[TaskInstance], mode: str,
                       Ks: Sequence[int] | None = None, K_ref: int = 1024, seed: int = 0, *,
                       M: int = 8, alpha: float = DEFAULT_ALPHA,
                       recipe: str | Recipe = Recipe.PROXY_PLUS_CHRF, max_len: int = 8,
                       hard_cap: int = 8, min_instances: int = 10) -> GapCurve:
    """Gap between the K-sample group mean and the K_ref-sample reference.

    Per instance, ``K_ref`` rewards are drawn once and ``Q(K)`` is the mean of
    the first ``K``; the curve reports mean and std of ``Q(K) - Q(K_ref)``
    across instances.
    """
    if len(instances) < min_instances:
        raise ValueError(f"need at least {min_instances} instances, got {len(instances)}")
    Ks = np.array(default_Ks(K_ref) if Ks is None else list(Ks), dtype=np.int64)
    if np.any(np.diff(Ks) <= 0) or Ks[0] < 1 or Ks[-1] > K_ref:
        raise ValueError("Ks must be strictly increasing within [1, K_ref]")
    gaps = np.empty((len(instances), len(Ks)))
    variances = []
    for b, inst in enumerate(instances):
        r = _mode_rewards(theta, inst, b, mode, K_ref, M, seed, alpha, recipe, max_len, hard_cap)
        q = np.cumsum(r) / np.arange(1, K_ref + 1)
        gaps[b] = q[Ks - 1] - q[-1]
        variances.append(r.var())
    return GapCurve(Ks, gaps.mean(axis=0), gaps.std(axis=0), K_ref, mode, gaps,
                    float(np.sqrt(np.mean(variances))))


def constructed_policy(vocab: Vocab, cipher: Sequence[int], sharpness: float = 10.0) -> PolicyParams:
    """Uniform translate head, near-deterministic post-edit head that writes
    ``cipher(src)`` and stops at the source's end regardless of the draft."""
    theta = PolicyParams.zeros(vocab)
    pe = theta.theta_pe
    for s in range(vocab.size):
        pe[s, :, cipher[s]] = sharpness
    pe[vocab.end, :, vocab.eos] = sharpness
    return theta


@dataclass(frozen=True)
class VarianceDecomposition:
    var_total: float
    expected_within: float
    var_between: float

    @property
    def residual(self) -> float:
        return self.var_total - (self.expected_within + self.var_between)


def decompose_mixture(p0: Sequence[float], values: Sequence[Sequence[float]],
                      probs: Sequence[Sequence[float]]) -> VarianceDecomposition:
    """Exact decomposition for a two-level discrete mixture.

    ``p0[i]`` is the probability of outer outcome ``i``; given ``i`` the reward
    takes ``values[i][k]`` with probability ``probs[i][k]``.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    z = p0.sum()
    if z <= 0:
        raise ValueError("outer probabilities must have positive mass")
    p0 = p0 / z
    means = np.array([np.dot(pr, v) / np.sum(pr) for v, pr in zip(values, probs)])
    mu = float(p0 @ means)
    var_total = sum(p * np.dot(pr, (np.asarray(v) - mu) ** 2) / np.sum(pr)
                    for p, v, pr in zip(p0, values, probs))
    within = sum(p * np.dot(pr, (np.asarray(v) - m) ** 2) / np.sum(pr)
                 for p, v, pr, m in zip(p0, values, probs, means))
    between = float(p0 @ (means - mu) ** 2)
    return VarianceDecomposition(float(var_total), float(within), between)


def variance_decomposition_exact(theta: PolicyParams, instance: TaskInstance, reward_fn: Callable,
                                 len0: int, len1: int,
                                 budget: int = DEFAULT_BUDGET) -> VarianceDecomposition:
    """Total, expected-within-draft and between-draft variance of the edit reward."""
    drafts = enumerate_support(theta, Mode.TRANSLATE, (instance.src,), len0, budget=budget)
    p0, values, probs = [], [], []
    for draft, p in drafts:
        edits = enumerate_support(theta, Mode.POST_EDIT, (instance.src, draft.tokens), len1, budget=budget)
        p0.append(p)
        values.append([reward_fn(instance, draft, e) for e, _ in edits])
        probs.append([q for _, q in edits])
    return decompose_mixture(p0, values, probs)


def mode_reward_variances(theta: PolicyParams, instance: TaskInstance, draft_tokens: Sequence[int],
                          cap: int, alpha: float = DEFAULT_ALPHA,
                          recipe: str | Recipe = Recipe.PROXY_PLUS_CHRF) -> dict:
    """Exact reward variance of a translation rollout and of a post-edit rollout
    conditioned on ``draft_tokens``."""
    out = {}
    tr = enumerate_support(theta, Mode.TRANSLATE, (instance.src,), cap)
    r = np.array([direct_reward(t.tokens, instance.tgt, recipe, t.over_budget).reward for t, _ in tr])
    p = np.array([q for _, q in tr])
    out["translate"] = float(p @ (r - p @ r) ** 2)
    pe = enumerate_support(theta, Mode.POST_EDIT, (instance.src, tuple(draft_tokens)), cap)
    r = np.array([pe_reward(instance.src, draft_tokens, t.tokens, instance.tgt, alpha, recipe,
                            t.over_budget).reward for t, _ in pe])
    p = np.array([q for _, q in pe])
    out["post_edit"] = float(p @ (r - p @ r) ** 2)
    return out


def mc_variance_scaling(dist: Sequence[float], Ns: Sequence[int], repeats: int,
                        seed: int = 0, probs: Sequence[float] | None = None) -> list[dict]:
    """Empirical variance of the N-sample mean against ``Var/N``.

    Draws come from the discrete law putting mass ``probs`` (uniform when
    omitted) on the points of ``dist``.
    """
    if repeats < 100:
        raise ValueError("repeats must be >= 100")
    dist = np.asarray(dist, dtype=np.float64)
    p = np.full(dist.size, 1.0 / dist.size) if probs is None else np.asarray(probs, dtype=np.float64)
    if p.shape != dist.shape or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
        raise ValueError("probs must be a distribution over dist")
    mu = float(p @ dist)
    pop_var = float(p @ (dist - mu) ** 2)
    rng = np.random.default_rng(seed)
    rows = []
    for N in Ns:
        means = rng.choice(dist, size=(repeats, int(N)), replace=True, p=p).mean(axis=1)
        emp = float(means.var(ddof=1))
        pred = pop_var / N
        rows.append({"N": int(N), "empirical_var": emp, "predicted_var": pred,
                     "ratio": emp / pred if pred > 0 else float("nan")})
    return rows


def pe_reward_fn(alpha: float = DEFAULT_ALPHA, recipe: str | Recipe = Recipe.PROXY_PLUS_CHRF):
    """Joint reward ``R(draft, edit)`` matching :func:`score_tree` on edits."""
    def reward(instance: TaskInstance, draft, edit) -> float:
        return pe_reward(instance.src, draft.tokens, edit.tokens, instance.tgt, alpha, recipe,
                         edit.over_budget).reward
    return reward


def _tree_parts(theta, tree, alpha, recipe, normalize):
    recs = score_tree(tree, alpha, recipe, penalize_drafts=normalize)
    groups = build_groups(tree, recs, normalize=normalize)
    pe_part = estimate_weighted_gradient(theta, tree, groups, 1.0, 0.0).table
    mt_part = estimate_weighted_gradient(theta, tree, groups, 0.0, 1.0).table
    return pe_part, mt_part


def expected_estimator_exact(theta: PolicyParams, instance: TaskInstance, N: int, M: int,
                             lambda_pe: float, lambda_mt: float, cap: int,
                             alpha: float = DEFAULT_ALPHA,
                             recipe: str | Recipe = Recipe.PROXY_PLUS_CHRF,
                             normalize: bool = False, budget: int = 10**5) -> np.ndarray:
    """Expectation of the single-tree estimator by enumerating every tree."""
    drafts = enumerate_support(theta, Mode.TRANSLATE, (instance.src,), cap)
    edit_sup = {d.tokens: enumerate_support(theta, Mode.POST_EDIT, (instance.src, d.tokens), cap)
                for d, _ in drafts}
    n_trees = len(drafts) ** N * max(len(v) for v in edit_sup.values()) ** (N * M)
    if n_trees > budget:
        raise ValueError(f"enumeration budget exceeded ({n_trees} > {budget})")
    total = np.zeros_like(theta.table)
    for dtuple in itertools.product(drafts, repeat=N):
        p_d = np.prod([p for _, p in dtuple])
        per_draft = [list(itertools.product(edit_sup[d.tokens], repeat=M)) for d, _ in dtuple]
        for combo in itertools.product(*per_draft):
            p = p_d * np.prod([q for row in combo for _, q in row])
            tree = TrajectoryTree(instance, [d for d, _ in dtuple], [[e for e, _ in row] for row in combo])
            pe_part, mt_part = _tree_parts(theta, tree, alpha, recipe, normalize)
            total += p * (lambda_pe * pe_part + lambda_mt * mt_part)
    return total


@dataclass
class EstimatorSamples:
    pe_parts: np.ndarray   # (samples, params)
    mt_parts: np.ndarray

    def estimates(self, lambda_pe: float, lambda_mt: float) -> np.ndarray:
        return lambda_pe * self.pe_parts + lambda_mt * self.mt_parts


def sample_estimator(theta: PolicyParams, instance: TaskInstance, samples: int, seed: int = 0, *,
                     N: int = 2, M: int = 2, cap: int = 2, alpha: float = DEFAULT_ALPHA,
                     recipe: str | Recipe = Recipe.PROXY_PLUS_CHRF, normalize: bool = False,
                     chunk: int = 4096) -> EstimatorSamples:
    """Per-tree gradient estimates split into their edit and draft terms.

    Tree ``s`` reads the streams of instance id ``s``, so samples are
    independent and reproducible.
    """
    pe_parts = np.empty((samples, theta.table.size))
    mt_parts = np.empty((samples, theta.table.size))
    for start in range(0, samples, chunk):
        ids = list(range(start, min(samples, start + chunk)))
        trees = hybrid_sample_many(theta, [instance] * len(ids), N, M, seed, instance_ids=ids,
                                   max_len=cap, hard_cap=cap)
        trajs, owner, w_pe, w_mt = [], [], [], []
        for k, tree in enumerate(trees):
            recs = score_tree(tree, alpha, recipe, penalize_drafts=normalize)
            groups = build_groups(tree, recs, normalize=normalize)
            t_pe, a = _tree_weights(tree, groups, 1.0, 0.0)
            _, b = _tree_weights(tree, groups, 0.0, 1.0)
            trajs.extend(t_pe)
            owner.extend([k] * len(t_pe))
            w_pe.append(a)
            w_mt.append(b)
        pe_parts[ids[0]:ids[-1] + 1], mt_parts[ids[0]:ids[-1] + 1] = _per_owner_scores(
            theta, trajs, np.array(owner), len(trees),
            np.stack([np.concatenate(w_pe), np.concatenate(w_mt)], axis=1))
    return EstimatorSamples(pe_parts, mt_parts)


def gradient_estimator_study(theta: PolicyParams, instance: TaskInstance,
                             lambda_settings: Sequence[tuple[float, float]], samples: int,
                             seed: int = 0, *, N: int = 2, M: int = 2, cap: int = 2,
                             alpha: float = DEFAULT_ALPHA,
                             recipe: str | Recipe = Recipe.PROXY_PLUS_CHRF,
                             raw_rewards: bool = True) -> list[dict]:
    """Sampled single-tree estimators against the exact two-term gradient.

    ``bias_z_max`` is the largest per-coordinate ``|mean - exact| / SE``
    against the unweighted gradient; ``target_z_max`` is the same against the
    weighted target ``lambda_pe * term_pe + lambda_mt * term_mt``.
    """
    exact = exact_gradient_terms(theta, instance, pe_reward_fn(alpha, recipe), cap, cap)
    full = exact.gradient.ravel()
    draws = sample_estimator(theta, instance, samples, seed, N=N, M=M, cap=cap, alpha=alpha,
                             recipe=recipe, normalize=not raw_rewards)
    rows = []
    for lp, lm in lambda_settings:
        est = draws.estimates(lp, lm)
        mean = est.mean(axis=0)
        var = est.var(axis=0, ddof=1)
        se = np.sqrt(var / samples)
        target = exact.weighted(lp, lm).ravel()
        rows.append({
            "lambda_pe": float(lp), "lambda_mt": float(lm), "samples": samples,
            "bias_max_abs": float(np.max(np.abs(mean - full))),
            "bias_z_max": _zmax(mean - full, se),
            "target_z_max": _zmax(mean - target, se),
            "mean_coord_var": float(var.mean()),
            "cosine_to_exact": _cos(mean, full),
            "cosine_to_target": _cos(mean, target),
        })
    return rows


def _per_owner_scores(theta, trajs, owner, n_owners, weights):
    # weights: (trajectories, k); returns k arrays of shape (n_owners, params)
    steps = [_steps(theta, t) for t in trajs]
    lens = np.array([len(r) for r, _ in steps])
    rows = np.concatenate([r for r, _ in steps])
    acts = np.concatenate([a for _, a in steps])
    own = np.repeat(owner, lens)
    w = np.repeat(weights, lens, axis=0)
    probs = softmax(theta.logits[rows], axis=1)
    R, A = theta.table.shape
    out = []
    for c in range(weights.shape[1]):
        g = np.zeros((n_owners, R, A))
        np.add.at(g, (own, rows), -w[:, c, None] * probs)
        np.add.at(g, (own, rows, acts), w[:, c])
        out.append(g.reshape(n_owners, -1))
    return out


def _zmax(diff: np.ndarray, se: np.ndarray) -> float:
    # coordinates with zero spread must match exactly
    tight = se == 0
    if np.any(np.abs(diff[tight]) > 1e-12):
        return float("inf")
    return float(np.max(np.abs(diff[~tight]) / se[~tight])) if np.any(~tight) else 0.0


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(a @ b / (na * nb)) if na > 0 and nb > 0 else float("nan")
