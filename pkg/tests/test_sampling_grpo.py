import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import population_advantages
from twostage_rl.grpo import (PENALTY, RewardRecord, build_groups, direct_reward,
                              group_advantages, mt_reward, pe_reward, score_tree)
from twostage_rl.metrics import semantic_proxy
from twostage_rl.policy import Mode, PolicyParams, TaskInstance, Vocab, make_trajectory
from twostage_rl.rng import CounterStream, stream_key, stream_keys, uniforms
from twostage_rl.sampling import TrajectoryTree, hybrid_sample, sample_edits

INST = TaskInstance((0, 1, 2), (2, 0, 1), (2, 0, 1))
rewards = st.lists(st.floats(-1, 2, allow_nan=False), min_size=2, max_size=12)


def theta(seed=0, V=3, scale=1.0):
    shape = PolicyParams.zeros(Vocab(V)).table.shape
    return PolicyParams(Vocab(V), scale * np.random.default_rng(seed).normal(size=shape))


# ---------------------------------------------------------------- rng

def test_stream_keys_are_pure_and_distinct():
    assert stream_key(1, 2, 3) == stream_key(1, 2, 3)
    keys = stream_keys([(0, 0, i, s) for i in range(50) for s in range(2)])
    assert len(set(keys.tolist())) == 100
    with pytest.raises(ValueError):
        stream_keys([(-1, 0)])


def test_uniform_prefix_stability_and_range():
    u5, u9 = uniforms([stream_key(4, 2)], 5), uniforms([stream_key(4, 2)], 9)
    assert np.array_equal(u5, u9[:, :5])
    big = uniforms(stream_keys([(k,) for k in range(2000)]), 8)
    assert big.min() >= 0.0 and big.max() < 1.0 and abs(big.mean() - 0.5) < 0.01
    s = CounterStream(4, 2)
    assert np.array_equal(np.concatenate([s.random(2), s.random(3)]), u5[0])


# ---------------------------------------------------------------- sampling

def test_tree_shape_and_budget():
    tree = hybrid_sample(theta(), INST, 8, 8, seed=3)
    assert tree.N == 8 and tree.M == 8 and tree.size == 72
    small = hybrid_sample(theta(), INST, 2, 2)
    assert (len(small.drafts), [len(r) for r in small.edits]) == (2, [2, 2])
    for d, row in zip(tree.drafts, tree.edits):
        assert all(e.mode is Mode.POST_EDIT and e.draft == d.tokens for e in row)


def test_group_size_guard():
    with pytest.raises(ValueError, match="group too small"):
        hybrid_sample(theta(), INST, 1, 4)
    with pytest.raises(ValueError, match="group too small"):
        hybrid_sample(theta(), INST, 4, 1)


def test_tree_determinism_bytes():
    a = hybrid_sample(theta(), INST, 4, 3, seed=11, instance_id=2, step=5).to_jsonl()
    b = hybrid_sample(theta(), INST, 4, 3, seed=11, instance_id=2, step=5).to_jsonl()
    assert a == b
    c = hybrid_sample(theta(), INST, 4, 3, seed=12, instance_id=2, step=5).to_jsonl()
    assert a != c
    rows = [json.loads(line) for line in a.splitlines()]
    assert len(rows) == 4 + 12 and {r["stage"] for r in rows} == {0, 1}


def test_edits_depend_only_on_their_draft():
    th = theta(2)
    d = make_trajectory(th, Mode.TRANSLATE, (INST.src,), [1, 1])
    other = make_trajectory(th, Mode.TRANSLATE, (INST.src,), [0])
    a = sample_edits(th, [INST], [[d, other]], 5, seed=1, max_len=4, hard_cap=4)[0][0]
    b = sample_edits(th, [INST], [[d, d]], 5, seed=1, max_len=4, hard_cap=4)[0][0]
    assert [e.tokens for e in a] == [e.tokens for e in b]


def test_truncated_drafts_keep_children():
    V = Vocab(3)
    t = PolicyParams.zeros(V).table
    t[:3, V.eos] = -1e9
    t[V.end, V.eos] = -1e9
    tree = hybrid_sample(PolicyParams(V, t), INST, 2, 2, max_len=2, hard_cap=2)
    assert all(d.truncated for d in tree.drafts)
    assert all(len(row) == 2 for row in tree.edits)


def test_tree_rejects_mismatched_edits():
    th = theta()
    d0 = make_trajectory(th, Mode.TRANSLATE, (INST.src,), [0])
    d1 = make_trajectory(th, Mode.TRANSLATE, (INST.src,), [1])
    e0 = make_trajectory(th, Mode.POST_EDIT, (INST.src, (0,)), [2])
    e1 = make_trajectory(th, Mode.POST_EDIT, (INST.src, (1,)), [2])
    TrajectoryTree(INST, [d0, d1], [[e0], [e1]])
    with pytest.raises(ValueError):
        TrajectoryTree(INST, [d0, d1], [[e1], [e0]])


# ---------------------------------------------------------------- rewards

def test_pe_reward_cases():
    gated = pe_reward(INST.src, [1, 1, 1], [1, 1, 1], INST.tgt)
    assert gated.gated and gated.reward == 0.0
    assert gated.semantic_component == pytest.approx(semantic_proxy([1, 1, 1], INST.tgt).value)
    assert gated.semantic_component == pytest.approx(1 / 3)
    top = pe_reward(INST.src, INST.tgt, INST.tgt, INST.tgt)
    assert top.reward == 2.0 and not top.gated
    assert pe_reward(INST.src, [0], [0, 0, 0, 0], INST.tgt, over_budget=True) is PENALTY
    # an edited output is never gated
    assert not pe_reward(INST.src, [1, 1, 1], [1, 1], INST.tgt).gated
    with pytest.raises(ValueError):
        pe_reward(INST.src, [0], [0], INST.tgt, alpha=0.0)


def test_reward_record_invariants():
    with pytest.raises(ValueError):
        RewardRecord(0.5, penalized=True)
    with pytest.raises(ValueError):
        RewardRecord(0.5, gated=True)
    with pytest.raises(ValueError):
        RewardRecord(2.5)
    assert {PENALTY.case, RewardRecord(0.0, gated=True).case, RewardRecord(1.0).case} == \
        {"penalized", "gated", "scored"}


def test_mt_reward_mean_and_penalty():
    th = theta()
    d = make_trajectory(th, Mode.TRANSLATE, (INST.src,), [0, 1])
    assert mt_reward(d, [RewardRecord(1.0), RewardRecord(2.0)]).reward == 1.5
    assert mt_reward(d, [PENALTY, PENALTY]).reward == -1.0
    trunc = make_trajectory(th, Mode.TRANSLATE, (INST.src,), [0, 1], truncated=True)
    assert mt_reward(trunc, [RewardRecord(2.0)]).penalized
    assert mt_reward(trunc, [RewardRecord(2.0)], penalize=False).reward == 2.0
    with pytest.raises(ValueError):
        mt_reward(d, [])


def test_mt_reward_equals_recomputed_child_mean():
    tree = hybrid_sample(theta(4), INST, 8, 8, seed=2, max_len=4, hard_cap=5)
    recs = score_tree(tree)
    for d, row, rec in zip(tree.drafts, tree.edits, recs.drafts):
        if d.over_budget:
            assert rec.penalized
            continue
        again = [pe_reward(INST.src, d.tokens, e.tokens, INST.tgt, over_budget=e.over_budget).reward
                 for e in row]
        assert rec.reward == pytest.approx(np.mean(again), abs=1e-15)


def test_direct_reward():
    assert direct_reward(INST.tgt, INST.tgt).reward == 2.0
    assert direct_reward([0], INST.tgt, over_budget=True) is PENALTY


# ---------------------------------------------------------------- groups

def test_group_advantages_values():
    a = group_advantages([1, 2, 3], eps=0.0)
    assert np.allclose(a, [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)
    assert np.array_equal(group_advantages([0.7] * 4), np.zeros(4))
    with pytest.raises(ValueError):
        group_advantages([1.0])


@settings(max_examples=300, deadline=None)
@given(rewards, st.floats(-5, 5, allow_nan=False))
def test_shift_invariance_and_mean_zero(r, c):
    a = group_advantages(r)
    assert np.allclose(a, population_advantages(r, 1e-6), atol=1e-9)
    shifted = [x + c for x in r]
    if np.std(r) > 1e-2:
        assert np.max(np.abs(group_advantages(shifted) - a)) <= 1e-12
    assert abs(a.sum()) <= 1e-9


def test_build_groups_shapes():
    t88 = hybrid_sample(theta(), INST, 8, 8)
    groups = build_groups(t88, score_tree(t88))
    assert len(groups) == 9 and all(len(g.rewards) == 8 for g in groups)
    t23 = hybrid_sample(theta(), INST, 2, 3)
    assert [len(g.rewards) for g in build_groups(t23, score_tree(t23))] == [2, 3, 3]
    raw = build_groups(t23, score_tree(t23), normalize=False)
    assert all(np.array_equal(g.advantages, g.rewards) for g in raw)
    recs = score_tree(t23)
    recs.edits[0] = recs.edits[0][:1]
    with pytest.raises(ValueError):
        build_groups(t23, recs)


def test_pe_groups_are_independent():
    tree = hybrid_sample(theta(1), INST, 3, 4, seed=5)
    recs = score_tree(tree)
    base = build_groups(tree, recs)
    recs.edits[2] = [RewardRecord(2.0)] * 3 + [RewardRecord(0.0)]
    changed = build_groups(tree, recs)
    for i in (0, 1):
        assert np.array_equal(base[1 + i].advantages, changed[1 + i].advantages)


def test_reward_casing_is_exclusive():
    tree = hybrid_sample(theta(3, scale=2.0), INST, 6, 6, seed=9, max_len=3, hard_cap=4)
    for rec in score_tree(tree).all():
        assert [rec.penalized, rec.gated, rec.case == "scored"].count(True) == 1
