"""Reward casing and GRPO group advantages."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .metrics import Recipe, quality_components
from .policy import TaskInstance, Trajectory
from .sampling import DRAFT_STAGE, EDIT_STAGE, TrajectoryTree

DEFAULT_ALPHA = 0.95
DEFAULT_EPS = 1e-6


@dataclass(frozen=True)
class RewardRecord:
    reward: float
    gated: bool = False
    penalized: bool = False
    semantic_component: float = 0.0

    def __post_init__(self):
        if self.penalized and (self.gated or self.reward != -1.0):
            raise ValueError("a penalized record must carry reward -1 and no gate")
        if self.gated and self.reward != 0.0:
            raise ValueError("a gated record must carry reward 0")
        if not -1.0 <= self.reward <= 2.0:
            raise ValueError(f"reward {self.reward} outside [-1, 2]")

    @property
    def case(self) -> str:
        return "penalized" if self.penalized else "gated" if self.gated else "scored"

    def to_dict(self) -> dict:
        return asdict(self)


PENALTY = RewardRecord(-1.0, penalized=True)


def pe_reward(src: Sequence[int], draft: Sequence[int], pe: Sequence[int], tgt: Sequence[int],
              alpha: float = DEFAULT_ALPHA, recipe: str | Recipe = Recipe.PROXY_PLUS_CHRF,
              over_budget: bool = False) -> RewardRecord:
    """Post-edit reward: penalty, then the unchanged-draft gate, then quality."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if over_budget:
        return PENALTY
    semantic, surface = quality_components(pe, tgt, recipe)
    if tuple(pe) == tuple(draft) and semantic < alpha:
        return RewardRecord(0.0, gated=True, semantic_component=semantic)
    return RewardRecord(semantic + surface, semantic_component=semantic)


def direct_reward(output: Sequence[int], tgt: Sequence[int],
                  recipe: str | Recipe = Recipe.PROXY_PLUS_CHRF,
                  over_budget: bool = False) -> RewardRecord:
    """Reward a translation by its own quality (no post-editing stage)."""
    if over_budget:
        return PENALTY
    semantic, surface = quality_components(output, tgt, recipe)
    return RewardRecord(semantic + surface, semantic_component=semantic)


def mt_reward(draft_record: Trajectory, child_records: Sequence[RewardRecord],
              penalize: bool = True) -> RewardRecord:
    """Draft reward = mean of its children's post-edit rewards.

    With ``penalize`` an over-budget draft gets -1 regardless of its children.
    """
    if len(child_records) == 0:
        raise ValueError("a draft needs at least one post-edit child")
    if penalize and draft_record.over_budget:
        return PENALTY
    mean = float(np.mean([c.reward for c in child_records]))
    return RewardRecord(mean, semantic_component=float(np.mean([c.semantic_component for c in child_records])))


def group_advantages(rewards: Sequence[float], eps: float = DEFAULT_EPS) -> np.ndarray:
    """``(r - mean) / (std + eps)`` with population std; constant groups give zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("need at least 2 rewards per group")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    centred = r - r.mean()
    return centred / (r.std() + eps)


@dataclass
class GrpoGroup:
    kind: str
    index: int | None
    member_ids: list
    rewards: np.ndarray
    advantages: np.ndarray


@dataclass
class TreeRecords:
    drafts: list
    edits: list

    def all(self) -> list[RewardRecord]:
        return list(self.drafts) + [r for row in self.edits for r in row]


def score_tree(tree: TrajectoryTree, alpha: float = DEFAULT_ALPHA,
               recipe: str | Recipe = Recipe.PROXY_PLUS_CHRF, draft_reward: str = "post_edit_mean",
               penalize_drafts: bool = True) -> TreeRecords:
    """Score every trajectory of a tree.

    ``draft_reward='post_edit_mean'`` rewards drafts by the mean of their
    children; ``'direct'`` by their own quality.
    """
    inst: TaskInstance = tree.instance
    edits = [[pe_reward(inst.src, d.tokens, e.tokens, inst.tgt, alpha, recipe, e.over_budget)
              for e in row] for d, row in zip(tree.drafts, tree.edits)]
    if draft_reward == "post_edit_mean":
        drafts = [mt_reward(d, row, penalize_drafts) for d, row in zip(tree.drafts, edits)]
    elif draft_reward == "direct":
        drafts = [direct_reward(d.tokens, inst.tgt, recipe, penalize_drafts and d.over_budget)
                  for d in tree.drafts]
    else:
        raise ValueError(f"unknown draft_reward {draft_reward!r}")
    return TreeRecords(drafts, edits)


def build_groups(tree: TrajectoryTree, records: TreeRecords, eps: float = DEFAULT_EPS,
                 normalize: bool = True) -> list[GrpoGroup]:
    """One group over the drafts, then one group per draft over its edits.

    With ``normalize=False`` the advantages are the raw rewards.
    """
    if len(records.drafts) != tree.N or len(records.edits) != tree.N or \
            any(len(row) != tree.M for row in records.edits):
        raise ValueError("records do not cover the tree")

    def make(kind, index, ids, recs):
        r = np.array([rec.reward for rec in recs], dtype=np.float64)
        adv = group_advantages(r, eps) if normalize else r.copy()
        return GrpoGroup(kind, index, ids, r, adv)

    groups = [make("mt", None, [(DRAFT_STAGE, i, -1) for i in range(tree.N)], records.drafts)]
    for i, row in enumerate(records.edits):
        groups.append(make("pe", i, [(EDIT_STAGE, i, j) for j in range(tree.M)], row))
    return groups
