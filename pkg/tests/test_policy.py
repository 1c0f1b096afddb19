import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from oracles import central_difference, objective_oracle, seq_prob, softmax_row, support
from twostage_rl.grpo import pe_reward
from twostage_rl.policy import (Mode, PolicyParams, TaskInstance, Vocab, enumerate_support,
                                enumerate_trajectories, exact_gradient_terms, exact_objective,
                                exact_objective_and_gradient, log_prob, logprob_gradient,
                                make_cipher_instance, make_task, make_trajectory, sample_batch,
                                sample_trajectory, score_sum)
from twostage_rl.rng import CounterStream

GOLDEN_SEED_42 = {"src": (1, 1, 3), "tgt": (2, 2, 0), "cipher": (3, 2, 1, 0)}


def random_theta(V, seed, scale=1.0, copy_bias=0.0):
    rng = np.random.default_rng(seed)
    shape = PolicyParams.zeros(Vocab(V)).table.shape
    return PolicyParams(Vocab(V), scale * rng.normal(size=shape), copy_bias)


def test_vocab_and_instance_invariants():
    with pytest.raises(ValueError):
        Vocab(1)
    v = Vocab(4)
    assert v.eos == 4 and v.n_actions == 5
    inst = make_cipher_instance(np.random.default_rng(0), v, 5)
    assert len(inst.src) == len(inst.tgt) == 5
    assert all(inst.cipher[s] == t for s, t in zip(inst.src, inst.tgt))
    with pytest.raises(ValueError):
        make_cipher_instance(np.random.default_rng(0), v, 0)
    with pytest.raises(ValueError):
        TaskInstance((0, 1), (0, 0), (0, 1))


def test_identity_cipher_copies_source():
    inst = make_cipher_instance(np.random.default_rng(3), Vocab(2), 4, cipher=(0, 1))
    assert inst.tgt == inst.src


def test_golden_instance_seed_42():
    inst = make_cipher_instance(np.random.default_rng(42), Vocab(4), 3)
    assert (inst.src, inst.tgt, inst.cipher) == (GOLDEN_SEED_42["src"], GOLDEN_SEED_42["tgt"],
                                                 GOLDEN_SEED_42["cipher"])
    record = json.loads(inst.to_json(seed=42))
    assert record == {"seed": 42, "vocab_size": 4, "length": 3, **{k: list(v) for k, v in GOLDEN_SEED_42.items()}}
    assert TaskInstance.from_json(inst.to_json(42)) == inst


def test_make_task_shares_cipher():
    insts = make_task(np.random.default_rng(1), Vocab(5), 3, 6)
    assert len({i.cipher for i in insts}) == 1


def test_log_prob_uniform_and_shifted():
    theta = PolicyParams.zeros(Vocab(4))
    for a in range(5):
        assert log_prob(theta, Mode.TRANSLATE, 0, a) == pytest.approx(math.log(1 / 5), abs=1e-15)
    t = theta.table.copy()
    t[theta.row(Mode.POST_EDIT, (1, 2)), 3] = 10.0
    theta = theta.with_table(t)
    expected = softmax_row([0, 0, 0, 10.0, 0])[3]
    assert math.exp(log_prob(theta, Mode.POST_EDIT, (1, 2), 3)) == pytest.approx(expected, abs=1e-15)
    with pytest.raises(ValueError):
        log_prob(theta, Mode.TRANSLATE, 9, 0)
    with pytest.raises(ValueError):
        theta.row(Mode.POST_EDIT, (0, 7))


def test_rows_normalize():
    theta = random_theta(4, 0, scale=3.0)
    from scipy.special import softmax
    assert np.allclose(softmax(theta.logits, axis=1).sum(axis=1), 1.0, atol=1e-12)


def test_deterministic_policy_decodes_argmax():
    V = Vocab(3)
    inst = TaskInstance((0, 2, 1), (1, 0, 2), (1, 2, 0))
    t = PolicyParams.zeros(V).table
    for s in range(3):
        t[s, inst.cipher[s]] = 50.0
    t[V.end, V.eos] = 50.0
    theta = PolicyParams(V, t)
    traj = sample_trajectory(theta, Mode.TRANSLATE, (inst.src,), CounterStream(1, 2), 8, 8)
    assert traj.tokens == inst.tgt and not traj.truncated
    assert traj.total_logp == pytest.approx(sum(traj.step_logps)) and traj.total_logp <= 0


def test_forced_truncation():
    V = Vocab(3)
    t = PolicyParams.zeros(V).table
    t[:, V.eos] = -1e9
    traj = sample_trajectory(PolicyParams(V, t), Mode.TRANSLATE, ((0,),), CounterStream(0), 3, 3)
    assert traj.truncated and traj.over_budget and len(traj.tokens) == 3
    assert traj.actions == traj.tokens


def test_over_budget_between_max_len_and_cap():
    V = Vocab(3)
    t = PolicyParams.zeros(V).table
    t[:, V.eos] = -1e9
    t[V.end, V.eos] = 1e9  # stop exactly after the source
    trajs = sample_batch(PolicyParams(V, t), Mode.TRANSLATE, [((0, 1, 2),)], np.full((1, 6), 0.5), 2, 6)
    assert len(trajs[0].tokens) == 3 and not trajs[0].truncated and trajs[0].over_budget


def test_uniform_length_distribution_chi_square():
    V = Vocab(2)
    theta = PolicyParams.zeros(V)
    cap, n = 6, 20000
    from twostage_rl.rng import stream_keys, uniforms
    u = uniforms(stream_keys([(7, k) for k in range(n)]), cap)
    lengths = np.array([len(t.tokens) for t in sample_batch(theta, Mode.TRANSLATE, [((0,),)] * n, u, cap, cap)])
    q = 1 / 3  # eos probability
    probs = [(1 - q) ** L * q for L in range(cap)] + [(1 - q) ** cap]
    observed = np.bincount(lengths, minlength=cap + 1)
    assert chisquare(observed, np.array(probs) * n).pvalue > 1e-3


def test_logprob_gradient_single_uniform_step():
    V = Vocab(4)
    theta = PolicyParams.zeros(V)
    traj = make_trajectory(theta, Mode.TRANSLATE, ((0,),), [2], truncated=True)
    g = logprob_gradient(theta, traj)
    assert list(g) == [0]
    assert np.allclose(g[0], [-.2, -.2, .8, -.2, -.2], atol=1e-15)


def test_logprob_gradient_matches_finite_differences():
    theta = random_theta(3, 5)
    traj = make_trajectory(theta, Mode.POST_EDIT, ((0, 2), (1,)), [2, 0, 1])
    grad = logprob_gradient(theta, traj)
    for row, g in grad.items():
        assert abs(g.sum()) < 1e-12
        for a in range(theta.table.shape[1]):
            def f(x, row=row, a=a):
                t = theta.table.copy()
                t[row, a] = x[0]
                return make_trajectory(theta.with_table(t), Mode.POST_EDIT, ((0, 2), (1,)), [2, 0, 1]).total_logp
            fd = central_difference(f, [theta.table[row, a]])[0]
            assert abs(fd - g[a]) <= 1e-6


def test_enumerate_uniform_small():
    theta = PolicyParams.zeros(Vocab(2))
    out = enumerate_trajectories(theta, Mode.TRANSLATE, ((0,),), 1)
    assert len(out) == 2
    assert all(p == pytest.approx(1 / 9, abs=1e-15) for _, p in out)
    two = enumerate_trajectories(theta, Mode.TRANSLATE, ((0,),), 2)
    assert sum(p for _, p in two) == pytest.approx((2 / 3) ** 2 / 3, abs=1e-15)
    with pytest.raises(ValueError, match="budget"):
        enumerate_trajectories(theta, Mode.TRANSLATE, ((0,),), 4, budget=10)


def test_enumerate_deterministic_single_path():
    V = Vocab(2)
    t = PolicyParams.zeros(V).table
    t[0, 1] = 60.0
    t[V.end, V.eos] = 60.0
    out = [(tr, p) for tr, p in enumerate_support(PolicyParams(V, t), Mode.TRANSLATE, ((0,),), 3) if p > 1e-12]
    assert len(out) == 1 and out[0][0].tokens == (1,) and out[0][1] == pytest.approx(1.0)


@pytest.mark.parametrize("mode,cond", [(Mode.TRANSLATE, ((0, 2),)), (Mode.POST_EDIT, ((0, 2), (1,)))])
def test_support_mass_and_probability_oracle(mode, cond):
    theta = random_theta(3, 11, copy_bias=1.5)
    sup = enumerate_support(theta, mode, cond, 3)
    assert sum(p for _, p in sup) == pytest.approx(1.0, abs=1e-12)
    for tr, p in sup:
        draft = cond[1] if mode is Mode.POST_EDIT else None
        assert p == pytest.approx(seq_prob(theta.logits, 3, mode.value, cond[0], draft, tr.actions), abs=1e-14)
    # score function has zero mean under the model
    assert np.abs(score_sum(theta, [t for t, _ in sup], [p for _, p in sup])).max() < 1e-10


def _pe_fn(inst, d, e):
    return pe_reward(inst.src, d.tokens, e.tokens, inst.tgt, over_budget=e.over_budget).reward


def test_objective_matches_independent_double_loop():
    theta = random_theta(3, 2)
    inst = TaskInstance((0, 2), (1, 0), (1, 2, 0))
    J, _ = exact_objective_and_gradient(theta, inst, _pe_fn, 2, 2)

    def reward(d, e, truncated):
        return pe_reward(inst.src, d, e, inst.tgt, over_budget=truncated).reward
    assert J == pytest.approx(objective_oracle(theta.logits, 3, inst.src, 2, 2, reward), abs=1e-12)
    assert exact_objective(theta, inst, _pe_fn, 2, 2) == pytest.approx(J, abs=1e-14)


def test_uniform_objective_is_weighted_support_average():
    theta = PolicyParams.zeros(Vocab(2))
    inst = TaskInstance((0,), (1,), (1, 0))
    J = exact_objective(theta, inst, _pe_fn, 1, 1)
    # uniform policy: every support element has probability 1/3 per step
    total = 0.0
    for d, da, _ in support(2, 1):
        for e, ea, tr in support(2, 1):
            total += (1 / 3) ** len(da) * (1 / 3) ** len(ea) * pe_reward(inst.src, d, e, inst.tgt, over_budget=tr).reward
    assert J == pytest.approx(total, abs=1e-14)


def test_constant_reward_identity():
    theta = random_theta(3, 4)
    inst = TaskInstance((0, 1), (2, 0), (2, 0, 1))
    J, g = exact_objective_and_gradient(theta, inst, lambda *_: 1.7, 2, 2)
    assert J == pytest.approx(1.7, abs=1e-10)
    assert np.abs(g).max() < 1e-10


def test_gradient_matches_finite_differences_everywhere():
    theta = random_theta(3, 9, scale=0.7)
    inst = TaskInstance((0, 2), (1, 0), (1, 2, 0))
    _, g = exact_objective_and_gradient(theta, inst, _pe_fn, 2, 2)
    flat = theta.table.ravel()
    worst = 0.0
    for k in range(flat.size):
        def f(x, k=k):
            t = flat.copy()
            t[k] = x[0]
            return exact_objective(theta.with_table(t.reshape(theta.table.shape)), inst, _pe_fn, 2, 2)
        worst = max(worst, abs(central_difference(f, [flat[k]])[0] - g.ravel()[k]))
    assert worst <= 1e-6


def test_row_shift_leaves_objective_unchanged():
    theta = random_theta(3, 6)
    inst = TaskInstance((1, 2), (2, 0), (1, 2, 0))
    J = exact_objective(theta, inst, _pe_fn, 2, 2)
    t = theta.table.copy()
    t[theta.row(Mode.POST_EDIT, (1, 0))] += 3.3
    t[0] -= 1.1
    assert exact_objective(theta.with_table(t), inst, _pe_fn, 2, 2) == pytest.approx(J, abs=1e-12)


def test_exact_terms_split():
    theta = random_theta(3, 8)
    inst = TaskInstance((0,), (1,), (1, 2, 0))
    ex = exact_gradient_terms(theta, inst, _pe_fn, 2, 2)
    assert np.allclose(ex.gradient, ex.term_pe + ex.term_mt)
    assert np.abs(ex.term_mt[theta.pe_rows]).max() == 0.0
    assert np.allclose(ex.weighted(8, 1), 8 * ex.term_pe + ex.term_mt)
    assert ex.draft_probs.sum() == pytest.approx(1.0)


def test_params_json_round_trip():
    theta = random_theta(3, 1, copy_bias=2.0)
    back = PolicyParams.from_json(theta.to_json())
    assert np.array_equal(back.table, theta.table) and back.copy_bias == 2.0
    assert np.array_equal(back.logits, theta.logits)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sampled_trajectory_invariants(seed):
    theta = random_theta(3, seed % 1000, scale=2.0)
    traj = sample_trajectory(theta, Mode.POST_EDIT, ((0, 1), (2,)), CounterStream(seed), 3, 4)
    assert len(traj.tokens) <= 4
    assert traj.truncated == (len(traj.actions) == len(traj.tokens))
    assert traj.total_logp == pytest.approx(sum(traj.step_logps)) and traj.total_logp <= 0
    again = make_trajectory(theta, Mode.POST_EDIT, ((0, 1), (2,)), traj.tokens, traj.truncated)
    assert again.total_logp == pytest.approx(traj.total_logp, abs=1e-12)
