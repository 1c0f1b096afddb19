"""Hybrid two-stage rollouts: N drafts per instance, M post-edits per draft."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import rng as crng
from .policy import Mode, PolicyParams, TaskInstance, Trajectory, sample_batch

DRAFT_STAGE = 0
EDIT_STAGE = 1


@dataclass
class TrajectoryTree:
    instance: TaskInstance
    drafts: list
    edits: list

    def __post_init__(self):
        if len(self.edits) != len(self.drafts):
            raise ValueError("need one edit list per draft")
        widths = {len(row) for row in self.edits}
        if len(widths) > 1:
            raise ValueError("every draft must have the same number of edits")
        for d, row in zip(self.drafts, self.edits):
            if any(e.conditioning != (self.instance.src, d.tokens) for e in row):
                raise ValueError("edit is not conditioned on its parent draft")

    @property
    def N(self) -> int:
        return len(self.drafts)

    @property
    def M(self) -> int:
        return len(self.edits[0]) if self.edits else 0

    @property
    def size(self) -> int:
        return self.N + self.N * self.M

    def walk(self) -> Iterator[tuple[tuple, Trajectory]]:
        """Yield ``((stage, i, j), trajectory)``; drafts carry ``j = -1``."""
        for i, d in enumerate(self.drafts):
            yield (DRAFT_STAGE, i, -1), d
        for i, row in enumerate(self.edits):
            for j, e in enumerate(row):
                yield (EDIT_STAGE, i, j), e

    def to_jsonl(self, records=None) -> str:
        """One JSON line per trajectory with its tree coordinates.

        ``records`` (optional) is anything with ``drafts[i]`` / ``edits[i][j]``
        reward records exposing ``to_dict()``.
        """
        lines = []
        for (stage, i, j), traj in self.walk():
            row = {"stage": stage, "i": i, "j": j, **traj.to_dict()}
            if records is not None:
                rec = records.drafts[i] if stage == DRAFT_STAGE else records.edits[i][j]
                row["record"] = rec.to_dict()
            lines.append(json.dumps(row, sort_keys=True))
        return "\n".join(lines) + "\n"


def _draft_coords(seed, step, instance_id, n):
    return [(seed, step, instance_id, DRAFT_STAGE, i, 0) for i in range(n)]


def _edit_coords(seed, step, instance_id, N, M):
    return [(seed, step, instance_id, EDIT_STAGE, i, j) for i in range(N) for j in range(M)]


def draft_keys(seed: int, step: int, instance_id: int, n: int) -> np.ndarray:
    return crng.stream_keys(_draft_coords(seed, step, instance_id, n))


def edit_keys(seed: int, step: int, instance_id: int, N: int, M: int) -> np.ndarray:
    return crng.stream_keys(_edit_coords(seed, step, instance_id, N, M))


def sample_drafts(theta: PolicyParams, instances: Sequence[TaskInstance], K: int, seed: int,
                  *, step: int = 0, instance_ids: Sequence[int] | None = None,
                  max_len: int, hard_cap: int) -> list[list[Trajectory]]:
    """``K`` translate-mode rollouts per instance, from the draft streams."""
    ids = range(len(instances)) if instance_ids is None else instance_ids
    keys = crng.stream_keys([c for iid in ids for c in _draft_coords(seed, step, iid, K)])
    conds = [(inst.src,) for inst in instances for _ in range(K)]
    flat = sample_batch(theta, Mode.TRANSLATE, conds, crng.uniforms(keys, hard_cap), max_len, hard_cap)
    return [flat[b * K:(b + 1) * K] for b in range(len(instances))]


def sample_edits(theta: PolicyParams, instances: Sequence[TaskInstance],
                 drafts: Sequence[Sequence[Trajectory]], M: int, seed: int, *, step: int = 0,
                 instance_ids: Sequence[int] | None = None, max_len: int,
                 hard_cap: int) -> list[list[list[Trajectory]]]:
    """``M`` post-edits for every draft; result indexed ``[instance][i][j]``."""
    ids = range(len(instances)) if instance_ids is None else instance_ids
    coords, conds = [], []
    for inst, iid, ds in zip(instances, ids, drafts):
        coords.extend(_edit_coords(seed, step, iid, len(ds), M))
        conds.extend((inst.src, d.tokens) for d in ds for _ in range(M))
    if not conds:
        return [[] for _ in instances]
    flat = sample_batch(theta, Mode.POST_EDIT, conds, crng.uniforms(crng.stream_keys(coords), hard_cap),
                        max_len, hard_cap)
    out, pos = [], 0
    for ds in drafts:
        rows = []
        for _ in ds:
            rows.append(flat[pos:pos + M])
            pos += M
        out.append(rows)
    return out


def hybrid_sample_many(theta: PolicyParams, instances: Sequence[TaskInstance], N: int, M: int,
                       seed: int, *, step: int = 0, instance_ids: Sequence[int] | None = None,
                       max_len: int, hard_cap: int) -> list[TrajectoryTree]:
    if N < 2 or M < 2:
        raise ValueError("group too small for advantage normalization")
    drafts = sample_drafts(theta, instances, N, seed, step=step, instance_ids=instance_ids,
                           max_len=max_len, hard_cap=hard_cap)
    edits = sample_edits(theta, instances, drafts, M, seed, step=step, instance_ids=instance_ids,
                         max_len=max_len, hard_cap=hard_cap)
    return [TrajectoryTree(inst, d, e) for inst, d, e in zip(instances, drafts, edits)]


def hybrid_sample(theta: PolicyParams, instance: TaskInstance, N: int = 8, M: int = 8,
                  seed: int = 0, *, instance_id: int = 0, step: int = 0, max_len: int = 8,
                  hard_cap: int = 8) -> TrajectoryTree:
    """Sample one tree. Each rollout reads its own stream keyed by
    ``(seed, step, instance_id, stage, i, j)``."""
    return hybrid_sample_many(theta, [instance], N, M, seed, step=step, instance_ids=[instance_id],
                              max_len=max_len, hard_cap=hard_cap)[0]
