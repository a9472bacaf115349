"""Small Markov games: tabular dynamics, fixtures, and induced MDPs.

Games are immutable; episode state (current state index, timestep, done)
lives in the caller.  Stateless matrix games are wrapped as one-state,
horizon-1 games.  Rewards are always a vector with one entry per agent.
"""

import itertools
import json
import pathlib
from dataclasses import dataclass

import numpy as np


class EnvError(Exception):
    pass


class InvalidAction(EnvError):
    pass


class SteppedTerminal(EnvError):
    pass


class NonDiscrete(EnvError):
    pass


class NotZeroSum(EnvError):
    pass


class NotSymmetric(EnvError):
    pass


class Discrete:
    __slots__ = ("n",)

    def __init__(self, n):
        self.n = int(n)

    def __repr__(self):
        return f"Discrete({self.n})"

    def __eq__(self, other):
        return isinstance(other, Discrete) and other.n == self.n


class Box1D:
    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi):
        self.lo, self.hi = float(lo), float(hi)
        if not self.lo < self.hi:
            raise EnvError(f"empty box [{lo}, {hi}]")

    def __repr__(self):
        return f"Box1D({self.lo}, {self.hi})"

    def __eq__(self, other):
        return isinstance(other, Box1D) and (other.lo, other.hi) == (self.lo, self.hi)


@dataclass(frozen=True)
class EpisodeState:
    index: int
    t: int
    done: bool = False


_FLAG_TOL = 1e-12


class MarkovGame:
    """N-agent Markov game over a finite state set.

    Discrete games carry dense tables:
      rewards[s, a1, ..., aN, agent], transition[s, a1, ..., aN, s'],
      terminal_after[s, a1, ..., aN] (episode ends after that step).
    Continuous-action games provide reward_fn(actions) -> vector instead
    and keep a single state.
    """

    def __init__(self, name, action_space, horizon, gamma, cooperative, zero_sum,
                 n_states=1, rewards=None, transition=None, terminal_after=None,
                 init_dist=None, reward_fn=None, obs_fns=None, meta=None):
        self.name = name
        self.action_space = list(action_space)
        self.n_agents = len(self.action_space)
        self.n_states = int(n_states)
        self.horizon = int(horizon)
        self.gamma = float(gamma)
        self.cooperative = bool(cooperative)
        self.zero_sum = bool(zero_sum)
        self.meta = dict(meta or {})
        self.obs_fns = obs_fns
        if self.horizon < 1:
            raise EnvError("horizon must be at least 1")

        if init_dist is None:
            init_dist = np.zeros(self.n_states)
            init_dist[0] = 1.0
        self.init_dist = np.asarray(init_dist, dtype=np.float64)
        if self.init_dist.shape != (self.n_states,) or abs(self.init_dist.sum() - 1.0) > _FLAG_TOL:
            raise EnvError("init_dist must be a distribution over states")

        if self.all_discrete():
            shape = (self.n_states,) + tuple(sp.n for sp in self.action_space)
            self.rewards = np.asarray(rewards, dtype=np.float64)
            self.transition = np.asarray(transition, dtype=np.float64)
            if self.rewards.shape != shape + (self.n_agents,):
                raise EnvError(f"rewards shape {self.rewards.shape}, expected {shape + (self.n_agents,)}")
            if self.transition.shape != shape + (self.n_states,):
                raise EnvError(f"transition shape {self.transition.shape}, expected {shape + (self.n_states,)}")
            rowsums = self.transition.sum(axis=-1)
            if np.abs(rowsums - 1.0).max() > _FLAG_TOL:
                raise EnvError("transition rows must sum to 1")
            if terminal_after is None:
                terminal_after = np.zeros(shape, dtype=bool)
            self.terminal_after = np.asarray(terminal_after, dtype=bool)
            if self.terminal_after.shape != shape:
                raise EnvError(f"terminal_after shape {self.terminal_after.shape}, expected {shape}")
            self.reward_fn = None
            self._check_flags_discrete()
        else:
            if reward_fn is None:
                raise EnvError("continuous games need reward_fn")
            if self.n_states != 1 or self.horizon != 1:
                raise EnvError("continuous games are single-state, horizon-1")
            self.reward_fn = reward_fn
            self.rewards = self.transition = None
            self.terminal_after = None
            self._check_flags_grid()

    # -- validation ---------------------------------------------------------
    def _check_flags_discrete(self):
        if self.cooperative:
            spread = np.abs(self.rewards - self.rewards[..., :1]).max()
            if spread > _FLAG_TOL:
                raise EnvError("cooperative flag set but agent rewards differ")
        if self.zero_sum:
            if np.abs(self.rewards.sum(axis=-1)).max() > _FLAG_TOL:
                raise EnvError("zero_sum flag set but rewards do not cancel")

    def _check_flags_grid(self):
        grid = np.linspace(-1.0, 1.0, 5)
        for actions in itertools.product(grid, repeat=self.n_agents):
            clipped = [min(max(a, sp.lo), sp.hi) for a, sp in zip(actions, self.action_space)]
            r = np.asarray(self.reward_fn(clipped), dtype=np.float64)
            if r.shape != (self.n_agents,):
                raise EnvError("reward_fn must return one value per agent")
            if self.cooperative and np.abs(r - r[0]).max() > _FLAG_TOL:
                raise EnvError("cooperative flag set but agent rewards differ")
            if self.zero_sum and abs(r.sum()) > _FLAG_TOL:
                raise EnvError("zero_sum flag set but rewards do not cancel")

    def all_discrete(self):
        return all(isinstance(sp, Discrete) for sp in self.action_space)

    # -- episode interface ---------------------------------------------------
    def reset(self, rng):
        index = int(rng.choice(self.n_states, p=self.init_dist))
        return EpisodeState(index=index, t=0, done=False)

    def step(self, state, actions, rng):
        """Advance one step; returns (next_state, reward_vector, done)."""
        if state.done:
            raise SteppedTerminal(f"episode already finished at t={state.t}")
        actions = self._validate_actions(actions)
        if self.all_discrete():
            key = (state.index,) + actions
            rewards = self.rewards[key].copy()
            probs = self.transition[key]
            nxt = int(rng.choice(self.n_states, p=probs))
            done = bool(self.terminal_after[key]) or state.t + 1 >= self.horizon
        else:
            rewards = np.asarray(self.reward_fn(actions), dtype=np.float64).copy()
            nxt = 0
            done = True
        return EpisodeState(index=nxt, t=state.t + 1, done=done), rewards, done

    def _validate_actions(self, actions):
        actions = tuple(actions)
        if len(actions) != self.n_agents:
            raise InvalidAction(f"{len(actions)} actions for {self.n_agents} agents")
        out = []
        for a, sp in zip(actions, self.action_space):
            if isinstance(sp, Discrete):
                ai = int(a)
                if ai != a or not 0 <= ai < sp.n:
                    raise InvalidAction(f"action {a!r} outside Discrete({sp.n})")
                out.append(ai)
            else:
                af = float(a)
                if not sp.lo <= af <= sp.hi:
                    raise InvalidAction(f"action {af} outside [{sp.lo}, {sp.hi}]")
                out.append(af)
        return tuple(out)

    # -- encodings -----------------------------------------------------------
    @property
    def state_dim(self):
        return self.n_states

    def encode_state(self, state):
        index = state.index if isinstance(state, EpisodeState) else int(state)
        vec = np.zeros(self.n_states)
        vec[index] = 1.0
        return vec

    def obs(self, agent, state):
        if self.obs_fns is None:
            return self.encode_state(state)
        index = state.index if isinstance(state, EpisodeState) else int(state)
        return np.asarray(self.obs_fns[agent](index), dtype=np.float64)

    def obs_dim(self, agent):
        return self.obs(agent, 0).shape[0]

    def reward_vector(self, state_index, joint):
        if not self.all_discrete():
            return np.asarray(self.reward_fn(joint), dtype=np.float64)
        return self.rewards[(int(state_index),) + tuple(joint)]


def step(env, state, actions, rng):
    return env.step(state, actions, rng)


def enumerate_joint_actions(env):
    """All joint actions in lexicographic order (last agent fastest)."""
    for sp in env.action_space:
        if not isinstance(sp, Discrete):
            raise NonDiscrete(f"cannot enumerate {sp!r}")
    return list(itertools.product(*(range(sp.n) for sp in env.action_space)))


# ---------------------------------------------------------------------------
# induced single-agent MDP under frozen opponents
# ---------------------------------------------------------------------------

class InducedMdp:
    """The MDP one agent faces when every other agent plays a fixed policy.

    kernel[s, a, s'] marginalizes the joint transition over opponent play
    (rows sum to 1); cont_kernel carries only the non-terminating share of
    that mass, which is what value iteration should bootstrap through.
    """

    def __init__(self, base, me, opponents, reward, kernel, cont_kernel):
        self.base = base
        self.me = me
        self.opponents = opponents
        self.reward = reward
        self.kernel = kernel
        self.cont_kernel = cont_kernel
        self.n_states = base.n_states
        self.n_actions = base.action_space[me].n
        self.gamma = base.gamma


def induce_mdp(env, me, opponent_policies):
    """Marginalize a discrete game over fixed opponent policies.

    opponent_policies maps agent index -> array (n_states, n_actions_j);
    the entry for `me` is ignored and may be absent.
    """
    if not env.all_discrete():
        raise NonDiscrete("induced MDPs require discrete action spaces")
    if not 0 <= me < env.n_agents:
        raise EnvError(f"no agent {me}")
    pols = {}
    for j in range(env.n_agents):
        if j == me:
            continue
        pi = np.asarray(opponent_policies[j], dtype=np.float64)
        if pi.shape != (env.n_states, env.action_space[j].n):
            raise EnvError(f"policy for agent {j} has shape {pi.shape}")
        if pi.min() < 0 or np.abs(pi.sum(axis=-1) - 1.0).max() > _FLAG_TOL:
            raise EnvError(f"policy for agent {j} is not a distribution")
        pols[j] = pi

    k_me = env.action_space[me].n
    reward = np.zeros((env.n_states, k_me))
    kernel = np.zeros((env.n_states, k_me, env.n_states))
    cont = np.zeros((env.n_states, k_me, env.n_states))
    for s in range(env.n_states):
        for joint in enumerate_joint_actions(env):
            w = 1.0
            for j, aj in enumerate(joint):
                if j != me:
                    w *= pols[j][s, aj]
            if w == 0.0:
                continue
            key = (s,) + joint
            a = joint[me]
            reward[s, a] += w * env.rewards[key][me]
            kernel[s, a] += w * env.transition[key]
            if not env.terminal_after[key]:
                cont[s, a] += w * env.transition[key]
    return InducedMdp(env, me, pols, reward, kernel, cont)


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------

def _matrix_game(name, payoffs, cooperative, zero_sum):
    payoffs = np.asarray(payoffs, dtype=np.float64)
    ks = payoffs.shape[:-1]
    shape = (1,) + ks
    transition = np.ones(shape + (1,))
    terminal = np.ones(shape, dtype=bool)
    return MarkovGame(
        name=name,
        action_space=[Discrete(k) for k in ks],
        horizon=1,
        gamma=1.0,
        cooperative=cooperative,
        zero_sum=zero_sum,
        n_states=1,
        rewards=payoffs[np.newaxis, ...],
        transition=transition,
        terminal_after=terminal,
    )


def matching_pennies():
    r1 = np.array([[1.0, -1.0], [-1.0, 1.0]])
    payoffs = np.stack([r1, -r1], axis=-1)
    return _matrix_game("matching_pennies", payoffs, cooperative=False, zero_sum=True)


def rock_paper_scissors():
    r1 = np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]])
    payoffs = np.stack([r1, -r1], axis=-1)
    return _matrix_game("rock_paper_scissors", payoffs, cooperative=False, zero_sum=True)


def coop_climb():
    shared = np.array([[11.0, -30.0, 0.0], [-30.0, 7.0, 6.0], [0.0, 0.0, 5.0]])
    payoffs = np.stack([shared, shared], axis=-1)
    return _matrix_game("coop_climb", payoffs, cooperative=True, zero_sum=False)


def two_step_coop():
    # s0: joint (0,0) moves to s1, anything else stays in s0, reward 0 either
    # way; s1: joint (1,1) pays +10 shared, every joint ends the episode.
    rewards = np.zeros((2, 2, 2, 2))
    rewards[1, 1, 1] = [10.0, 10.0]
    transition = np.zeros((2, 2, 2, 2))
    transition[0, :, :, 0] = 1.0
    transition[0, 0, 0] = [0.0, 1.0]
    transition[1, :, :, 1] = 1.0
    terminal = np.zeros((2, 2, 2), dtype=bool)
    terminal[1] = True
    return MarkovGame(
        name="two_step_coop",
        action_space=[Discrete(2), Discrete(2)],
        horizon=2,
        gamma=0.99,
        cooperative=True,
        zero_sum=False,
        n_states=2,
        rewards=rewards,
        transition=transition,
        terminal_after=terminal,
    )


def coop_cts():
    def shared_reward(actions):
        v = -(actions[0] + actions[1] - 1.0) ** 2
        return np.array([v, v])

    return MarkovGame(
        name="coop_cts",
        action_space=[Box1D(-1.0, 1.0), Box1D(-1.0, 1.0)],
        horizon=1,
        gamma=1.0,
        cooperative=True,
        zero_sum=False,
        n_states=1,
        reward_fn=shared_reward,
    )


def signal_relay():
    # states: 0=(t0,bit0) 1=(t0,bit1) 2=(t1,bit0) 3=(t1,bit1); agent 0 sees
    # the bit, agent 1 sees a constant; at t1 agent 1's action is graded
    # against the bit and the shared reward is 1 on a match.
    rewards = np.zeros((4, 2, 2, 2))
    for bit in (0, 1):
        s = 2 + bit
        rewards[s, :, bit, :] = 1.0
    transition = np.zeros((4, 2, 2, 4))
    transition[0, :, :, 2] = 1.0
    transition[1, :, :, 3] = 1.0
    transition[2, :, :, 2] = 1.0
    transition[3, :, :, 3] = 1.0
    terminal = np.zeros((4, 2, 2), dtype=bool)
    terminal[2] = terminal[3] = True
    bit_of_state = [0, 1, 0, 1]
    obs_fns = [
        lambda s: np.array([float(bit_of_state[s])]),
        lambda s: np.array([0.0]),
    ]
    return MarkovGame(
        name="signal_relay",
        action_space=[Discrete(2), Discrete(2)],
        horizon=2,
        gamma=0.99,
        cooperative=True,
        zero_sum=False,
        n_states=4,
        rewards=rewards,
        transition=transition,
        terminal_after=terminal,
        init_dist=[0.5, 0.5, 0.0, 0.0],
        obs_fns=obs_fns,
        meta={"comm": True, "bit_of_state": bit_of_state, "speaker": 0, "listener": 1},
    )


FIXTURES = {
    "matching_pennies": matching_pennies,
    "coop_climb": coop_climb,
    "coop_cts": coop_cts,
    "two_step_coop": two_step_coop,
    "signal_relay": signal_relay,
    "rock_paper_scissors": rock_paper_scissors,
}


def fixture_by_name(name):
    if name not in FIXTURES:
        raise EnvError(f"unknown fixture {name!r}; have {sorted(FIXTURES)}")
    return FIXTURES[name]()


# ---------------------------------------------------------------------------
# game files
# ---------------------------------------------------------------------------

def game_to_dict(env):
    """Serializable description of a discrete game."""
    if not env.all_discrete():
        raise NonDiscrete(f"{env.name}: continuous games are shipped as named builtins")
    if env.obs_fns is not None:
        raise EnvError(f"{env.name}: per-agent observation maps do not serialize")
    return {
        "name": env.name,
        "n_agents": env.n_agents,
        "actions": [sp.n for sp in env.action_space],
        "states": env.n_states,
        "rewards": env.rewards.tolist(),
        "transition": env.transition.tolist(),
        "flags": {"cooperative": env.cooperative, "zero_sum": env.zero_sum},
        "horizon": env.horizon,
        "gamma": env.gamma,
        "init_dist": env.init_dist.tolist(),
        "terminal_after": env.terminal_after.tolist(),
    }


def game_from_dict(obj):
    if "builtin" in obj:
        return fixture_by_name(obj["builtin"])
    required = {"n_agents", "actions", "states", "rewards", "transition", "flags", "horizon"}
    missing = required - set(obj)
    if missing:
        raise EnvError(f"game file missing keys {sorted(missing)}")
    actions = obj["actions"]
    if len(actions) != obj["n_agents"]:
        raise EnvError("actions list length must equal n_agents")
    flags = obj["flags"]
    return MarkovGame(
        name=obj.get("name", "game"),
        action_space=[Discrete(k) for k in actions],
        horizon=obj["horizon"],
        gamma=obj.get("gamma", 0.99 if obj["horizon"] > 1 else 1.0),
        cooperative=bool(flags.get("cooperative", False)),
        zero_sum=bool(flags.get("zero_sum", False)),
        n_states=obj["states"],
        rewards=obj["rewards"],
        transition=obj["transition"],
        terminal_after=obj.get("terminal_after"),
        init_dist=obj.get("init_dist"),
    )


def save_game(env, path):
    pathlib.Path(path).write_text(json.dumps(game_to_dict(env), indent=1))


def load_game(path):
    obj = json.loads(pathlib.Path(path).read_text())
    return game_from_dict(obj)


def fixtures_dir():
    return pathlib.Path(__file__).parent / "fixtures"


def resolve_env(spec_str):
    """A fixture name, or a path to a game file."""
    if spec_str in FIXTURES:
        return FIXTURES[spec_str]()
    p = pathlib.Path(spec_str)
    if p.suffix == ".json" and p.exists():
        return load_game(p)
    builtin_file = fixtures_dir() / f"{spec_str}.json"
    if builtin_file.exists():
        return load_game(builtin_file)
    raise EnvError(f"cannot resolve environment {spec_str!r}")
