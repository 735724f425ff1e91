import numpy as np
import pytest

from nap.architecture import ModelConfig, init_params
from nap.environment import BOState, candidate_set, discounted_return, reset, rollout, rollout_batch, step
from nap.tasks import TaskDataset, synthetic_family

TASK = synthetic_family(1, 1, 20, 1)[0]
PARAMS = init_params(ModelConfig(input_dim=1, embed_dim=16, ff_dim=16, layers=1, heads=2, bucket_count=8), 0)


def test_reset_examples(rng):
    s = reset(TASK, 0, rng)
    assert s.history == () and len(s.remaining) == 20 and s.step == 1
    s5 = reset(TASK, 5, np.random.default_rng(3))
    assert len(s5.remaining) == 15 and not set(s5.history) & set(s5.remaining)
    assert reset(TASK, 5, np.random.default_rng(3)).history == s5.history
    with pytest.raises(ValueError):
        reset(TASK, 20, rng)


def test_candidate_set_contract(rng):
    s = reset(TASK, 0, rng, budget=5)
    np.testing.assert_array_equal(candidate_set(s), TASK.inputs)
    chosen = s.remaining[3]
    s2, _, _ = step(s, 3)
    assert chosen not in s2.remaining and len(candidate_set(s2)) == 19
    empty = BOState(TASK, tuple(range(20)), 21, 30, ())
    with pytest.raises(ValueError):
        candidate_set(empty)


def test_rewards_running_max():
    d = TaskDataset("seq", np.array([[0.0], [0.5], [1.0]]), np.array([0.2, 0.5, 0.3]))
    s = reset(d, 0, np.random.default_rng(0), budget=3)
    rewards = []
    for _ in range(3):
        s, r, done = step(s, 0)
        rewards.append(r)
    assert rewards == [0.2, 0.5, 0.5] and done


def test_initial_points_feed_max():
    d = TaskDataset("seq", np.arange(4.0)[:, None], np.array([0.9, 0.1, 0.2, 0.3]))
    s = BOState(d, (0,), 1, 2, (1, 2, 3), 1)
    _, r, _ = step(s, 0)
    assert r == 0.9


def test_budget_one_done(rng):
    s = reset(TASK, 0, rng, budget=1)
    _, _, done = step(s, 0)
    assert done
    with pytest.raises(IndexError):
        step(s, 99)


def test_discounted_return_examples():
    assert discounted_return([1, 1, 1], 0.5) == 1.75
    assert discounted_return([0.7, 1, 1], 0.0) == 0.7
    assert discounted_return([0.2, 0.5, 0.5], 0.98) == pytest.approx(1.17020, abs=1e-10)
    with pytest.raises(ValueError):
        discounted_return([1.0], 1.0)


def test_rollout_contract():
    tr = rollout(PARAMS, TASK, 8, 0.1, np.random.default_rng(0))
    assert len(tr.steps) == 8 and tr.done
    assert (tr.log_probs <= 0).all()
    assert (np.diff(tr.rewards) >= 0).all()
    np.testing.assert_array_equal(tr.rewards, np.maximum.accumulate(tr.ys))
    picked = [s.candidates[s.action] for s in tr.steps]
    assert len(set(picked)) == len(picked)
    np.testing.assert_allclose(np.prod(np.exp(tr.log_probs)), np.exp(tr.log_probs.sum()), rtol=1e-9)


def test_rollout_argmax_deterministic():
    a = rollout(PARAMS, TASK, 6, "argmax", np.random.default_rng(0))
    b = rollout(PARAMS, TASK, 6, "argmax", np.random.default_rng(99))
    assert [s.action for s in a.steps] == [s.action for s in b.steps]


def test_rollout_length_capped_by_dataset():
    small = synthetic_family(2, 1, 5, 1)[0]
    tr = rollout(PARAMS, small, 10, 0.1, np.random.default_rng(0), n_init=2)
    assert len(tr.steps) == 3


def test_rollout_dimension_mismatch():
    with pytest.raises(ValueError):
        rollout(PARAMS, synthetic_family(0, 1, 5, 2)[0], 3, 0.1, np.random.default_rng(0))


def test_batched_rollout_matches_single():
    tasks = synthetic_family(3, 3, 15, 1)
    states = [reset(t, 0, np.random.default_rng(0), budget=5) for t in tasks]
    batched = rollout_batch(PARAMS, states, 0.1, [np.random.default_rng(i) for i in range(3)])
    for i, t in enumerate(tasks):
        single = rollout_batch(PARAMS, [states[i]], 0.1, [np.random.default_rng(i)])[0]
        assert [s.action for s in single.steps] == [s.action for s in batched[i].steps]
        np.testing.assert_allclose(single.log_probs, batched[i].log_probs, atol=1e-9)
