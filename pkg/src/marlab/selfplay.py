"""Self-play for zero-sum matrix games: one shared categorical policy plays
every seat, trained by score-function policy gradient on pooled two-seat
experience.  An exploit probe freezes the policy and trains a fresh best
responder against it, measuring how far from equilibrium the policy sits.

Reported per-batch payoff uses a fair coin to decide which physical seat is
"seat 1" in each episode, so the reported mean is centered at zero for any
policy on any zero-sum game; systematic drift signals an accounting bug
rather than policy quality.
"""

import threading

import numpy as np

from . import ndiff
from .envs import Discrete, NotSymmetric, NotZeroSum
from .ndiff import Graph, backward, param, sgd_step


def check_selfplay_env(env):
    """A shared policy can seat-swap only on a one-state, two-player matrix
    game where both seats choose from the same action set."""
    if not env.zero_sum:
        raise NotZeroSum(f"{env.name} is not zero-sum")
    ok = (
        env.n_agents == 2
        and env.n_states == 1
        and env.horizon == 1
        and all(isinstance(sp, Discrete) for sp in env.action_space)
        and env.action_space[0].n == env.action_space[1].n
    )
    if not ok:
        raise NotSymmetric(f"{env.name}: seats are not interchangeable for a shared policy")


class SelfPlayRun:
    """Shared-policy training state: one logits row serves both seats."""

    def __init__(self, env, rng=None, lr=0.05, batch_episodes=256):
        check_selfplay_env(env)
        self.env = env
        self.k = env.action_space[0].n
        self.logits = param(np.zeros((1, self.k)), name="shared_policy/logits")
        self.lr = float(lr)
        self.batch_episodes = int(batch_episodes)
        self.history = []
        self.last_loss = None

    def policy(self):
        z = self.logits.value[0]
        e = np.exp(z - z.max())
        return e / e.sum()

    def to_checkpoint(self, config_echo=None):
        return {
            "policy": ndiff.params_to_json([(self.logits.name, self.logits)]),
            "config": dict(config_echo or {}),
        }

    def load_checkpoint(self, blob):
        ndiff.params_from_json(blob["policy"], [(self.logits.name, self.logits)])


def _play_batch(env, probs_a, probs_b, n, rng):
    """Sample n one-shot episodes; returns (a, b, r1, r2) arrays."""
    k = env.action_space[0].n
    a = rng.choice(k, size=n, p=probs_a)
    b = rng.choice(k, size=n, p=probs_b)
    r1 = env.rewards[0, a, b, 0]
    r2 = env.rewards[0, a, b, 1]
    return a, b, r1, r2


def _play_batch_threaded(env, probs_a, probs_b, n, threads, rng):
    """Episode generation split across worker threads.

    Chunk seeds are drawn from the caller's generator up front and each worker
    fills its own slice, so the result does not depend on thread scheduling.
    """
    bounds = np.linspace(0, n, threads + 1).astype(int)
    seeds = rng.integers(0, 2**63 - 1, size=threads)
    a = np.zeros(n, dtype=np.int64)
    b = np.zeros(n, dtype=np.int64)
    r1 = np.zeros(n)
    r2 = np.zeros(n)

    def work(c):
        lo, hi = bounds[c], bounds[c + 1]
        if hi == lo:
            return
        part = _play_batch(env, probs_a, probs_b, hi - lo, np.random.default_rng(seeds[c]))
        a[lo:hi], b[lo:hi], r1[lo:hi], r2[lo:hi] = part

    workers = [threading.Thread(target=work, args=(c,)) for c in range(threads)]
    for t in workers:
        t.start()
    for t in workers:
        t.join()
    return a, b, r1, r2


def _policy_gradient_step(logits, lr, weights, scale):
    """Ascend E[log pi . weights] / scale by one SGD step; returns the loss."""
    g = Graph()
    logp = g.log(g.softmax(logits))
    objective = g.mean(g.matmul(logp, g.constant(weights[:, None] / scale)))
    loss = g.neg(objective)
    backward(g, loss)
    sgd_step([logits], lr)
    logits.zero_grad()
    return float(loss.value)


def selfplay_step(run, env, batch_episodes, rng, threads=1):
    """Play a batch with the shared policy in both seats, apply one pooled
    policy-gradient step (each seat's own reward as its return), and return
    the coin-relabeled seat-1 mean payoff."""
    check_selfplay_env(env)
    p = run.policy()
    if threads > 1:
        a, b, r1, r2 = _play_batch_threaded(env, p, p, batch_episodes, threads, rng)
    else:
        a, b, r1, r2 = _play_batch(env, p, p, batch_episodes, rng)
    coin = rng.random(batch_episodes) < 0.5
    reported = float(np.where(coin, r1, r2).mean())

    weights = np.zeros(run.k)
    np.add.at(weights, a, r1)
    np.add.at(weights, b, r2)
    run.last_loss = _policy_gradient_step(run.logits, run.lr, weights, 2.0 * batch_episodes)

    run.history.append(reported)
    return reported


class BestResponder:
    """Seat-2 categorical policy trained against a frozen seat-1 mix."""

    def __init__(self, k):
        self.k = k
        self.logits = param(np.zeros((1, k)), name="responder/logits")

    def policy(self):
        z = self.logits.value[0]
        e = np.exp(z - z.max())
        return e / e.sum()


def exploit(frozen, env, train_steps, rng, lr=0.05, batch_episodes=256,
            eval_episodes=10000):
    """Train a fresh seat-2 responder against a frozen seat-1 policy and
    return (responder, its mean payoff over a final evaluation batch).

    frozen may be a SelfPlayRun or a bare probability vector; it is read
    once up front and never written.
    """
    check_selfplay_env(env)
    probs = frozen.policy() if hasattr(frozen, "policy") else np.asarray(frozen, dtype=np.float64)
    probs = probs.copy()
    responder = BestResponder(env.action_space[0].n)

    for _ in range(train_steps):
        q = responder.policy()
        _, b, _, r2 = _play_batch(env, probs, q, batch_episodes, rng)
        advantage = r2 - r2.mean()
        weights = np.zeros(responder.k)
        np.add.at(weights, b, advantage)
        _policy_gradient_step(responder.logits, lr, weights, float(batch_episodes))

    q = responder.policy()
    _, _, _, r2 = _play_batch(env, probs, q, eval_episodes, rng)
    return responder, float(r2.mean())


def total_variation(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
