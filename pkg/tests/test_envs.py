import itertools

import numpy as np
import pytest

from marlab import envs
from marlab.envs import (
    Box1D,
    Discrete,
    EnvError,
    InvalidAction,
    MarkovGame,
    NonDiscrete,
    SteppedTerminal,
    enumerate_joint_actions,
    fixture_by_name,
    game_from_dict,
    game_to_dict,
    induce_mdp,
    load_game,
    resolve_env,
)


def rng():
    return np.random.default_rng(0)


def test_matching_pennies_payoffs():
    g = fixture_by_name("matching_pennies")
    s = g.reset(rng())
    nxt, r, done = g.step(s, (0, 0), rng())
    assert np.array_equal(r, [1.0, -1.0])
    assert done and nxt.done
    for joint in enumerate_joint_actions(g):
        r = g.reward_vector(0, joint)
        assert r.sum() == 0.0


def test_coop_climb_payoffs():
    g = fixture_by_name("coop_climb")
    assert np.array_equal(g.reward_vector(0, (1, 1)), [7.0, 7.0])
    assert np.array_equal(g.reward_vector(0, (0, 0)), [11.0, 11.0])
    assert np.array_equal(g.reward_vector(0, (0, 1)), [-30.0, -30.0])
    for joint in enumerate_joint_actions(g):
        r = g.reward_vector(0, joint)
        assert r[0] == r[1]


def test_coop_cts_reward_surface():
    g = fixture_by_name("coop_cts")
    s = g.reset(rng())
    _, r, done = g.step(s, (0.5, 0.5), rng())
    assert np.array_equal(r, [0.0, 0.0])
    assert done
    s = g.reset(rng())
    _, r, _ = g.step(s, (1.0, 1.0), rng())
    assert np.allclose(r, [-1.0, -1.0])


def test_box_action_validation():
    g = fixture_by_name("coop_cts")
    with pytest.raises(InvalidAction):
        g.step(g.reset(rng()), (1.5, 0.0), rng())


def test_two_step_coop_dynamics():
    g = fixture_by_name("two_step_coop")
    r0 = rng()
    s = g.reset(r0)
    assert s.index == 0
    s1, r, done = g.step(s, (0, 0), r0)
    assert s1.index == 1 and not done and np.array_equal(r, [0.0, 0.0])
    s2, r, done = g.step(s1, (1, 1), r0)
    assert done and np.array_equal(r, [10.0, 10.0])
    with pytest.raises(SteppedTerminal):
        g.step(s2, (0, 0), r0)


def test_two_step_coop_horizon_caps_episodes():
    g = fixture_by_name("two_step_coop")
    r0 = rng()
    s = g.reset(r0)
    s, _, done = g.step(s, (0, 1), r0)   # stay in s0
    assert s.index == 0 and not done
    s, _, done = g.step(s, (0, 1), r0)   # horizon 2 reached
    assert done


def test_discrete_action_validation():
    g = fixture_by_name("matching_pennies")
    with pytest.raises(InvalidAction):
        g.step(g.reset(rng()), (0, 2), rng())
    with pytest.raises(InvalidAction):
        g.step(g.reset(rng()), (0,), rng())


def test_enumerate_joint_actions_orders():
    g1 = fixture_by_name("matching_pennies")
    assert enumerate_joint_actions(g1) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    g2 = fixture_by_name("coop_climb")
    joints = enumerate_joint_actions(g2)
    assert len(joints) == 9
    assert joints[0] == (0, 0) and joints[-1] == (2, 2)
    with pytest.raises(NonDiscrete):
        enumerate_joint_actions(fixture_by_name("coop_cts"))


def test_flag_validation_rejects_lies():
    r1 = np.array([[1.0, -1.0], [-1.0, 1.0]])
    payoffs = np.stack([r1, r1], axis=-1)[np.newaxis]
    with pytest.raises(EnvError):
        MarkovGame("bad", [Discrete(2), Discrete(2)], horizon=1, gamma=1.0,
                   cooperative=False, zero_sum=True, n_states=1,
                   rewards=payoffs, transition=np.ones((1, 2, 2, 1)))


def test_transition_rows_must_be_distributions():
    with pytest.raises(EnvError):
        MarkovGame("bad", [Discrete(2)], horizon=1, gamma=1.0,
                   cooperative=False, zero_sum=False, n_states=1,
                   rewards=np.zeros((1, 2, 1)), transition=np.full((1, 2, 1), 0.5))


def test_induced_mdp_uniform_opponent_on_pennies():
    g = fixture_by_name("matching_pennies")
    mdp = induce_mdp(g, 0, {1: np.array([[0.5, 0.5]])})
    assert np.allclose(mdp.reward, [[0.0, 0.0]])
    assert np.allclose(mdp.kernel.sum(axis=-1), 1.0)
    assert np.allclose(mdp.cont_kernel, 0.0)   # horizon-1 game never continues


def test_induced_mdp_biased_opponent_matches_brute_force():
    g = fixture_by_name("matching_pennies")
    pi = np.array([[0.7, 0.3]])
    mdp = induce_mdp(g, 0, {1: pi})
    # independent brute force over the joint table
    expect = np.zeros(2)
    for a_me in (0, 1):
        expect[a_me] = sum(pi[0, b] * g.reward_vector(0, (a_me, b))[0] for b in (0, 1))
    assert np.allclose(mdp.reward[0], expect)
    assert np.allclose(expect, [0.4, -0.4])


def test_induced_mdp_seat2_view():
    g = fixture_by_name("matching_pennies")
    pi = np.array([[0.7, 0.3]])
    mdp = induce_mdp(g, 1, {0: pi})
    assert np.allclose(mdp.reward[0], [-0.4, 0.4])


def test_induced_mdp_kernel_rows_on_two_step():
    g = fixture_by_name("two_step_coop")
    uniform = np.full((2, 2), 0.5)
    mdp = induce_mdp(g, 0, {1: uniform})
    assert np.allclose(mdp.kernel.sum(axis=-1), 1.0)
    # from s0, my action 0 against a coin-flip partner reaches s1 half the time
    assert np.allclose(mdp.kernel[0, 0], [0.5, 0.5])
    assert np.allclose(mdp.kernel[0, 1], [1.0, 0.0])
    # s1 rows terminate, so no continuation mass anywhere out of s1
    assert np.allclose(mdp.cont_kernel[1], 0.0)


def test_induced_mdp_rejects_bad_policies():
    g = fixture_by_name("matching_pennies")
    with pytest.raises(EnvError):
        induce_mdp(g, 0, {1: np.array([[0.9, 0.3]])})
    with pytest.raises(NonDiscrete):
        induce_mdp(fixture_by_name("coop_cts"), 0, {1: np.array([[1.0]])})


def test_signal_relay_observation_split():
    g = fixture_by_name("signal_relay")
    bits = g.meta["bit_of_state"]
    for s in range(4):
        assert g.obs(0, s)[0] == bits[s]
        assert g.obs(1, s)[0] == 0.0
    assert g.obs_dim(0) == g.obs_dim(1) == 1


def test_signal_relay_reward_grades_listener():
    g = fixture_by_name("signal_relay")
    r0 = rng()
    for bit in (0, 1):
        start = envs.EpisodeState(index=bit, t=0)
        mid, r, done = g.step(start, (0, 0), r0)
        assert not done and np.array_equal(r, [0.0, 0.0])
        assert mid.index == 2 + bit
        _, r, done = g.step(mid, (1, bit), r0)
        assert done and np.array_equal(r, [1.0, 1.0])
        mid2, _, _ = g.step(start, (1, 1), r0)
        _, r, _ = g.step(mid2, (0, 1 - bit), r0)
        assert np.array_equal(r, [0.0, 0.0])


def test_signal_relay_init_distribution():
    g = fixture_by_name("signal_relay")
    r0 = np.random.default_rng(123)
    starts = [g.reset(r0).index for _ in range(2000)]
    assert set(starts) == {0, 1}
    assert 0.45 < np.mean([s == 1 for s in starts]) < 0.55


def test_encode_state_one_hot():
    g = fixture_by_name("two_step_coop")
    assert np.array_equal(g.encode_state(1), [0.0, 1.0])
    assert np.array_equal(g.encode_state(envs.EpisodeState(0, 0)), [1.0, 0.0])
    assert np.array_equal(fixture_by_name("coop_cts").encode_state(0), [1.0])


def test_game_file_round_trip():
    g = fixture_by_name("two_step_coop")
    blob = game_to_dict(g)
    back = game_from_dict(blob)
    assert np.array_equal(back.rewards, g.rewards)
    assert np.array_equal(back.transition, g.transition)
    assert np.array_equal(back.terminal_after, g.terminal_after)
    assert back.horizon == g.horizon and back.gamma == g.gamma
    assert back.cooperative == g.cooperative and back.zero_sum == g.zero_sum


def test_shipped_fixture_files_resolve():
    for name in ("matching_pennies", "coop_climb", "coop_cts", "two_step_coop",
                 "signal_relay", "rock_paper_scissors"):
        from_file = load_game(envs.fixtures_dir() / f"{name}.json")
        assert from_file.name == name
        assert resolve_env(name).name == name


def test_game_from_dict_rejects_missing_keys():
    with pytest.raises(EnvError):
        game_from_dict({"n_agents": 2})


def test_rock_paper_scissors_is_antisymmetric():
    g = fixture_by_name("rock_paper_scissors")
    for a, b in itertools.product(range(3), range(3)):
        assert g.reward_vector(0, (a, b))[0] == -g.reward_vector(0, (b, a))[0]


def test_reset_ignores_done_state_reuse():
    g = fixture_by_name("matching_pennies")
    r0 = rng()
    s = g.reset(r0)
    _, _, done = g.step(s, (1, 1), r0)
    assert done
    fresh = g.reset(r0)
    assert fresh.t == 0 and not fresh.done
