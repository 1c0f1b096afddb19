"""Tabular two-mode policy over a substitution-cipher transduction task.

One parameter table holds both heads. Translate-mode rows are indexed by the
aligned source token; post-edit rows by the pair (aligned source token,
aligned draft token). Past the end of a sequence the context is the sentinel
``END`` (= vocab size), which is what lets a policy learn *where* to stop.
Every row spans the actions ``0..V`` where ``V`` is end-of-sequence.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

DEFAULT_BUDGET = 10**6


class Mode(str, Enum):
    TRANSLATE = "translate"
    POST_EDIT = "post_edit"


@dataclass(frozen=True)
class Vocab:
    size: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError("vocab size must be >= 2")

    @property
    def eos(self) -> int:
        return self.size

    @property
    def end(self) -> int:
        return self.size

    @property
    def n_actions(self) -> int:
        return self.size + 1


@dataclass(frozen=True)
class TaskInstance:
    src: tuple
    tgt: tuple
    cipher: tuple

    def __post_init__(self):
        object.__setattr__(self, "src", tuple(int(t) for t in self.src))
        object.__setattr__(self, "tgt", tuple(int(t) for t in self.tgt))
        object.__setattr__(self, "cipher", tuple(int(t) for t in self.cipher))
        if sorted(self.cipher) != list(range(len(self.cipher))):
            raise ValueError("cipher must be a permutation of the content tokens")
        if len(self.src) != len(self.tgt):
            raise ValueError("src and tgt must have equal length")
        if any(self.cipher[s] != t for s, t in zip(self.src, self.tgt)):
            raise ValueError("tgt must equal cipher(src) position-wise")

    @property
    def vocab(self) -> Vocab:
        return Vocab(len(self.cipher))

    def to_json(self, seed: int | None = None) -> str:
        return json.dumps({"seed": seed, "vocab_size": len(self.cipher), "length": len(self.src),
                           "src": list(self.src), "tgt": list(self.tgt),
                           "cipher": list(self.cipher)}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TaskInstance":
        d = json.loads(text)
        inst = cls(d["src"], d["tgt"], d["cipher"])
        if len(inst.cipher) != d["vocab_size"] or len(inst.src) != d["length"]:
            raise ValueError("instance record is inconsistent")
        return inst


def make_cipher_instance(rng: np.random.Generator, vocab: Vocab, length: int,
                         cipher: Sequence[int] | None = None) -> TaskInstance:
    """Draw a source uniformly and (unless given) a uniform cipher."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if cipher is None:
        cipher = rng.permutation(vocab.size)
    src = rng.integers(0, vocab.size, size=length)
    cipher = tuple(int(c) for c in cipher)
    return TaskInstance(tuple(src), tuple(cipher[s] for s in src), cipher)


def make_task(rng: np.random.Generator, vocab: Vocab, length: int, n: int) -> list[TaskInstance]:
    """``n`` instances sharing one cipher, so a single table can solve them all."""
    cipher = tuple(int(c) for c in rng.permutation(vocab.size))
    return [make_cipher_instance(rng, vocab, length, cipher) for _ in range(n)]


class PolicyParams:
    """The single parameter vector, stored as one ``(rows, actions)`` table.

    ``copy_bias`` is a fixed (untrained) logit bonus on post-edit rows for the
    action that copies the aligned draft token; past the draft's end that
    action is eos. The policy's logits are ``table + prior``.
    """

    def __init__(self, vocab: Vocab, table: np.ndarray | None = None, copy_bias: float = 0.0):
        self.vocab = vocab
        self.copy_bias = float(copy_bias)
        S = vocab.size + 1
        shape = (S + S * S, vocab.n_actions)
        if table is None:
            table = np.zeros(shape)
        table = np.asarray(table, dtype=np.float64)
        if table.shape != shape:
            raise ValueError(f"table shape {table.shape} != {shape}")
        self.table = table
        self.prior = np.zeros(shape)
        if self.copy_bias:
            s, d = np.divmod(np.arange(S * S), S)
            self.prior[S + s * S + d, d] = self.copy_bias

    @classmethod
    def zeros(cls, vocab: Vocab, copy_bias: float = 0.0) -> "PolicyParams":
        return cls(vocab, copy_bias=copy_bias)

    @property
    def logits(self) -> np.ndarray:
        return self.table + self.prior if self.copy_bias else self.table

    @property
    def n_ctx(self) -> int:
        return self.vocab.size + 1

    @property
    def theta_mt(self) -> np.ndarray:
        return self.table[: self.n_ctx]

    @property
    def theta_pe(self) -> np.ndarray:
        S = self.n_ctx
        return self.table[S:].reshape(S, S, self.vocab.n_actions)

    @property
    def mt_rows(self) -> slice:
        return slice(0, self.n_ctx)

    @property
    def pe_rows(self) -> slice:
        return slice(self.n_ctx, self.table.shape[0])

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.vocab, self.table.copy(), self.copy_bias)

    def with_table(self, table: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.vocab, table, self.copy_bias)

    def row(self, mode: Mode | str, context) -> int:
        S = self.n_ctx
        if Mode(mode) is Mode.TRANSLATE:
            s = int(context)
            if not 0 <= s < S:
                raise ValueError(f"unknown context {context!r}")
            return s
        s, d = (int(c) for c in context)
        if not (0 <= s < S and 0 <= d < S):
            raise ValueError(f"unknown context {context!r}")
        return S + s * S + d

    def context_rows(self, mode: Mode | str, conditioning: Sequence[Sequence[int]],
                     length: int) -> np.ndarray:
        """Row index used at each step ``0..length-1`` under ``conditioning``."""
        end = self.vocab.end
        pad = (end,) * length
        s = np.asarray((tuple(conditioning[0]) + pad)[:length], dtype=np.int64)
        if Mode(mode) is Mode.TRANSLATE:
            return s
        d = np.asarray((tuple(conditioning[1]) + pad)[:length], dtype=np.int64)
        return self.n_ctx + s * self.n_ctx + d

    def to_json(self) -> str:
        return json.dumps({"vocab_size": self.vocab.size, "copy_bias": self.copy_bias,
                           "table": self.table.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "PolicyParams":
        d = json.loads(text)
        return cls(Vocab(d["vocab_size"]), np.array(d["table"]), d.get("copy_bias", 0.0))


def _conditioning(mode: Mode, conditioning) -> tuple:
    cond = tuple(tuple(int(t) for t in part) for part in conditioning)
    if len(cond) != (1 if mode is Mode.TRANSLATE else 2):
        raise ValueError(f"conditioning for {mode.value} must have {1 if mode is Mode.TRANSLATE else 2} parts")
    return cond


def log_prob(theta: PolicyParams, mode: Mode | str, context, action: int) -> float:
    if not 0 <= action < theta.vocab.n_actions:
        raise ValueError(f"action {action} out of range")
    row = theta.logits[theta.row(mode, context)]
    return float(log_softmax(row)[action])


@dataclass(frozen=True)
class Trajectory:
    mode: Mode
    conditioning: tuple
    tokens: tuple
    step_logps: tuple
    total_logp: float
    truncated: bool
    over_budget: bool = False
    eos: int = field(default=-1, repr=False)

    @property
    def src(self) -> tuple:
        return self.conditioning[0]

    @property
    def draft(self) -> tuple | None:
        return self.conditioning[1] if self.mode is Mode.POST_EDIT else None

    @property
    def actions(self) -> tuple:
        return self.tokens if self.truncated else self.tokens + (self.eos,)

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "conditioning": [list(c) for c in self.conditioning],
                "tokens": list(self.tokens), "step_logps": list(self.step_logps),
                "total_logp": self.total_logp, "truncated": self.truncated,
                "over_budget": self.over_budget}


def _sample_rows(table: np.ndarray, rows: np.ndarray, u: np.ndarray | None):
    # u=None decodes greedily
    n, cap = rows.shape
    eos = table.shape[1] - 1
    actions = np.full((n, cap), -1, dtype=np.int64)
    logps = np.zeros((n, cap))
    alive = np.ones(n, dtype=bool)
    for t in range(cap):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        lp = log_softmax(table[rows[idx, t]], axis=1)
        if u is None:
            a = np.argmax(lp, axis=1)
        else:
            cdf = np.cumsum(np.exp(lp), axis=1)
            a = np.minimum((cdf < u[idx, t, None] * cdf[:, -1:]).sum(axis=1), eos)
        actions[idx, t] = a
        logps[idx, t] = lp[np.arange(idx.size), a]
        alive[idx[a == eos]] = False
    return actions, logps, alive


def sample_batch(theta: PolicyParams, mode: Mode | str, conditionings: Sequence,
                 uniforms: np.ndarray | None, max_len: int, hard_cap: int) -> list[Trajectory]:
    """Sample one trajectory per conditioning; row ``k`` consumes ``uniforms[k]``.

    ``uniforms=None`` takes the most likely action at every step instead.
    """
    mode = Mode(mode)
    if not hard_cap >= max_len >= 1:
        raise ValueError("need hard_cap >= max_len >= 1")
    conds = [_conditioning(mode, c) for c in conditionings]
    if not conds:
        return []
    if uniforms is not None:
        uniforms = np.asarray(uniforms, dtype=np.float64)
        if uniforms.shape[0] != len(conds) or uniforms.shape[1] < hard_cap:
            raise ValueError("uniforms must have shape (n, >= hard_cap)")
        uniforms = uniforms[:, :hard_cap]
    rows = np.stack([theta.context_rows(mode, c, hard_cap) for c in conds])
    actions, logps, alive = _sample_rows(theta.logits, rows, uniforms)
    eos = theta.vocab.eos
    out = []
    for k, cond in enumerate(conds):
        acts = actions[k]
        truncated = bool(alive[k])
        n_steps = hard_cap if truncated else int(np.argmax(acts == eos)) + 1
        tokens = tuple(int(a) for a in acts[: n_steps if truncated else n_steps - 1])
        steps = tuple(float(x) for x in logps[k, :n_steps])
        out.append(Trajectory(mode, cond, tokens, steps, float(sum(steps)), truncated,
                              truncated or len(tokens) > max_len, eos))
    return out


def sample_trajectory(theta: PolicyParams, mode: Mode | str, conditioning, rng,
                      max_len: int, hard_cap: int) -> Trajectory:
    """Autoregressive sample; stops on eos or at ``hard_cap`` (then truncated)."""
    u = np.asarray(rng.random(hard_cap), dtype=np.float64).reshape(1, -1)
    return sample_batch(theta, mode, [conditioning], u, max_len, hard_cap)[0]


def make_trajectory(theta: PolicyParams, mode: Mode | str, conditioning, tokens: Sequence[int],
                    truncated: bool = False, max_len: int | None = None) -> Trajectory:
    """Score a given token sequence under ``theta`` as a :class:`Trajectory`."""
    mode = Mode(mode)
    cond = _conditioning(mode, conditioning)
    tokens = tuple(int(t) for t in tokens)
    eos = theta.vocab.eos
    acts = tokens if truncated else tokens + (eos,)
    rows = theta.context_rows(mode, cond, len(acts))
    lp = log_softmax(theta.logits[rows], axis=1)[np.arange(len(acts)), list(acts)] if acts else np.zeros(0)
    steps = tuple(float(x) for x in lp)
    over = truncated or (max_len is not None and len(tokens) > max_len)
    return Trajectory(mode, cond, tokens, steps, float(sum(steps)), truncated, over, eos)


def _steps(theta: PolicyParams, traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    acts = np.asarray(traj.actions, dtype=np.int64)
    return theta.context_rows(traj.mode, traj.conditioning, len(acts)), acts


def logprob_gradient(theta: PolicyParams, trajectory: Trajectory) -> dict[int, np.ndarray]:
    """Sparse gradient of ``total_logp``: row index -> gradient row."""
    rows, acts = _steps(theta, trajectory)
    grad: dict[int, np.ndarray] = {}
    probs = softmax(theta.logits[rows], axis=1)
    for r, a, p in zip(rows, acts, probs):
        g = grad.setdefault(int(r), np.zeros(theta.vocab.n_actions))
        g -= p
        g[a] += 1.0
    return grad


def score_sum(theta: PolicyParams, trajectories: Sequence[Trajectory],
              weights: Sequence[float] | np.ndarray) -> np.ndarray:
    """Dense ``sum_k w_k * grad log pi(tau_k)`` shaped like ``theta.table``."""
    out = np.zeros_like(theta.table)
    if len(trajectories) == 0:
        return out
    rows_l, acts_l, w_l = [], [], []
    for traj, w in zip(trajectories, weights):
        if w == 0.0:
            continue
        rows, acts = _steps(theta, traj)
        rows_l.append(rows)
        acts_l.append(acts)
        w_l.append(np.full(len(rows), float(w)))
    if not rows_l:
        return out
    rows, acts, w = np.concatenate(rows_l), np.concatenate(acts_l), np.concatenate(w_l)
    np.add.at(out, rows, -w[:, None] * softmax(theta.logits[rows], axis=1))
    np.add.at(out, (rows, acts), w)
    return out


def _check_budget(count: int, budget: int) -> None:
    if count > budget:
        raise ValueError(f"enumeration budget exceeded ({count} > {budget})")


def _sequences(V: int, L: int) -> np.ndarray:
    if L == 0:
        return np.zeros((1, 0), dtype=np.int64)
    return np.array(list(itertools.product(range(V), repeat=L)), dtype=np.int64)


def _enumerate(theta: PolicyParams, mode: Mode, cond: tuple, L: int, with_eos: bool,
               max_len: int | None) -> list[tuple[Trajectory, float]]:
    V, eos = theta.vocab.size, theta.vocab.eos
    n_steps = L + (1 if with_eos else 0)
    rows = theta.context_rows(mode, cond, n_steps)
    lsm = log_softmax(theta.logits[rows], axis=1) if n_steps else np.zeros((0, V + 1))
    seqs = _sequences(V, L)
    step_lp = lsm[np.arange(L), seqs] if L else np.zeros((seqs.shape[0], 0))
    if with_eos:
        step_lp = np.concatenate([step_lp, np.full((seqs.shape[0], 1), lsm[L, eos])], axis=1)
    out = []
    truncated = not with_eos
    for seq, lps in zip(seqs, step_lp):
        tokens = tuple(int(t) for t in seq)
        steps = tuple(float(x) for x in lps)
        total = float(lps.sum())
        over = truncated or (max_len is not None and len(tokens) > max_len)
        out.append((Trajectory(mode, cond, tokens, steps, total, truncated, over, eos), float(np.exp(total))))
    return out


def enumerate_trajectories(theta: PolicyParams, mode: Mode | str, conditioning, exact_len: int,
                           budget: int = DEFAULT_BUDGET) -> list[tuple[Trajectory, float]]:
    """All trajectories with exactly ``exact_len`` content tokens then eos."""
    mode = Mode(mode)
    _check_budget((theta.vocab.size + 1) ** exact_len, budget)
    return _enumerate(theta, mode, _conditioning(mode, conditioning), exact_len, True, None)


def enumerate_support(theta: PolicyParams, mode: Mode | str, conditioning, hard_cap: int,
                      max_len: int | None = None,
                      budget: int = DEFAULT_BUDGET) -> list[tuple[Trajectory, float]]:
    """The full support of the sampler capped at ``hard_cap``; masses sum to 1.

    Lengths ``0..hard_cap-1`` end in eos; length ``hard_cap`` sequences are the
    truncated paths.
    """
    mode = Mode(mode)
    V = theta.vocab.size
    _check_budget(sum(V**L for L in range(hard_cap + 1)), budget)
    cond = _conditioning(mode, conditioning)
    max_len = hard_cap if max_len is None else max_len
    out = []
    for L in range(hard_cap):
        out.extend(_enumerate(theta, mode, cond, L, True, max_len))
    out.extend(_enumerate(theta, mode, cond, hard_cap, False, max_len))
    return out


RewardFn = Callable[[TaskInstance, Trajectory, Trajectory], float]


@dataclass
class ExactGradient:
    """Objective and the two gradient terms (edit term, draft term)."""

    objective: float
    term_pe: np.ndarray
    term_mt: np.ndarray
    draft_probs: np.ndarray
    draft_means: np.ndarray

    @property
    def gradient(self) -> np.ndarray:
        return self.term_pe + self.term_mt

    def weighted(self, lambda_pe: float, lambda_mt: float) -> np.ndarray:
        return lambda_pe * self.term_pe + lambda_mt * self.term_mt


def exact_gradient_terms(theta: PolicyParams, instance: TaskInstance, reward_fn: RewardFn,
                         N_len: int, M_len: int, budget: int = DEFAULT_BUDGET) -> ExactGradient:
    """Enumerate every (draft, edit) pair under caps ``N_len`` / ``M_len``."""
    drafts = enumerate_support(theta, Mode.TRANSLATE, (instance.src,), N_len, budget=budget)
    V = theta.vocab.size
    _check_budget(len(drafts) * sum(V**L for L in range(M_len + 1)), budget)
    term_pe = np.zeros_like(theta.table)
    p0s, means = [], []
    for draft, p0 in drafts:
        edits = enumerate_support(theta, Mode.POST_EDIT, (instance.src, draft.tokens), M_len, budget=budget)
        trajs = [e for e, _ in edits]
        p1 = np.array([p for _, p in edits])
        r = np.array([reward_fn(instance, draft, e) for e in trajs], dtype=np.float64)
        term_pe += score_sum(theta, trajs, p0 * p1 * r)
        p0s.append(p0)
        means.append(float(p1 @ r))
    p0s, means = np.array(p0s), np.array(means)
    term_mt = score_sum(theta, [d for d, _ in drafts], p0s * means)
    return ExactGradient(float(p0s @ means), term_pe, term_mt, p0s, means)


def exact_objective_and_gradient(theta: PolicyParams, instance: TaskInstance, reward_fn: RewardFn,
                                 N_len: int, M_len: int,
                                 budget: int = DEFAULT_BUDGET) -> tuple[float, np.ndarray]:
    ex = exact_gradient_terms(theta, instance, reward_fn, N_len, M_len, budget)
    return ex.objective, ex.gradient


def exact_objective(theta: PolicyParams, instance: TaskInstance, reward_fn: RewardFn,
                    N_len: int, M_len: int, budget: int = DEFAULT_BUDGET) -> float:
    """Objective alone, without any gradient bookkeeping (finite-difference target)."""
    total = 0.0
    for draft, p0 in enumerate_support(theta, Mode.TRANSLATE, (instance.src,), N_len, budget=budget):
        edits = enumerate_support(theta, Mode.POST_EDIT, (instance.src, draft.tokens), M_len, budget=budget)
        total += p0 * sum(p * reward_fn(instance, draft, e) for e, p in edits)
    return total
