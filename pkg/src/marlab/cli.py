"""Experiment runner: config ingestion, training orchestration, metric
emission, checkpointing, oracle queries, and a gradient self-test.

Config is a single JSON file; command-line flags override file keys and both
override built-in defaults.  The environment variable MARLAB_SEED, when set,
overrides the seed from either source.  Exit codes: 0 success, 1 runtime
failure, 2 usage or config error.

Every training run leaves three artifacts in its output directory:
metrics.csv (fixed column schema), checkpoint.json (parameters plus a
sha256 checksum over the payload), and config_echo.json (the fully resolved
config, byte-stable under reload).  Communication runs additionally write
dial_metrics.csv with step, loss and evaluation accuracy.
"""

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import pathlib
import sys
import time

import numpy as np

from . import dial as dialmod
from . import envs, maddpg, ndiff, oracle, qmix, selfplay
from .buffer import JointTransition, ReplayBuffer
from .ndiff import DenseNet, Graph, grad_check


class CliError(Exception):
    exit_code = 1


class InvalidConfig(CliError):
    exit_code = 2


class IncompatibleAlgoEnv(CliError):
    exit_code = 2


class IoError(CliError):
    exit_code = 1


class ChecksumMismatch(CliError):
    exit_code = 1


ALGOS = ("iql", "vdn", "qmix", "maddpg_ctde", "maddpg_dec", "selfplay", "dial", "rial")

METRICS_HEADER = ["step", "episodes", "loss", "epsilon",
                  "eval_return_mean", "eval_return_per_agent", "extra"]

GRADCHECK_TOL = 1e-4


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    algo: str
    env: str
    seed: int
    gamma: float
    lr: float
    total_steps: int
    batch_size: int
    buffer_capacity: int
    target_update_interval: int
    tau: float
    epsilon_start: float
    epsilon_end: float
    epsilon_decay_steps: int
    hidden_sizes: list
    embed_dim: int
    beta: float
    eval_interval: int
    eval_episodes: int
    out_dir: str


_BASE_DEFAULTS = {
    "algo": "qmix",
    "env": "two_step_coop",
    "seed": 0,
    "gamma": None,           # None -> the environment's own discount
    "lr": None,              # None -> per-algo default below
    "total_steps": 20000,
    "batch_size": None,
    "buffer_capacity": 5000,
    "target_update_interval": 200,
    "tau": 0.01,
    "epsilon_start": 1.0,
    "epsilon_end": 0.05,
    "epsilon_decay_steps": 10000,
    "hidden_sizes": None,
    "embed_dim": 8,
    "beta": 0.01,
    "eval_interval": 1000,
    "eval_episodes": 200,
    "out_dir": None,         # None -> runs/<algo>-<env>-s<seed>
}

_ALGO_DEFAULTS = {
    "iql": {"lr": 5e-3, "batch_size": 32, "hidden_sizes": [32]},
    "vdn": {"lr": 5e-3, "batch_size": 32, "hidden_sizes": [32]},
    "qmix": {"lr": 5e-3, "batch_size": 32, "hidden_sizes": [32]},
    "maddpg_ctde": {"lr": 1e-3, "batch_size": 64, "hidden_sizes": [64, 64]},
    "maddpg_dec": {"lr": 1e-3, "batch_size": 64, "hidden_sizes": [64, 64]},
    "selfplay": {"lr": 0.05, "batch_size": 256, "hidden_sizes": []},
    "dial": {"lr": 5e-3, "batch_size": 32, "hidden_sizes": [16]},
    "rial": {"lr": 5e-3, "batch_size": 32, "hidden_sizes": [32]},
}


def _as_int(name, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise InvalidConfig(f"{name} must be an integer, got {v!r}")
    return int(v)


def _as_float(name, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise InvalidConfig(f"{name} must be a number, got {v!r}")
    return float(v)


def build_config(file_dict=None, flag_dict=None):
    """Merge defaults, config-file keys, and flag overrides into a validated
    RunConfig.  Precedence: flags > file > defaults."""
    file_dict = dict(file_dict or {})
    flag_dict = dict(flag_dict or {})
    known = set(_BASE_DEFAULTS)
    for source, label in ((file_dict, "config file"), (flag_dict, "flags")):
        unknown = set(source) - known
        if unknown:
            raise InvalidConfig(f"unknown {label} keys: {sorted(unknown)}")

    merged = dict(_BASE_DEFAULTS)
    merged.update(file_dict)
    merged.update(flag_dict)

    algo = merged["algo"]
    if algo not in ALGOS:
        raise InvalidConfig(f"algo must be one of {ALGOS}, got {algo!r}")
    for key, val in _ALGO_DEFAULTS[algo].items():
        if merged[key] is None:
            merged[key] = val

    if "MARLAB_SEED" in os.environ:
        try:
            merged["seed"] = int(os.environ["MARLAB_SEED"])
        except ValueError:
            raise InvalidConfig("MARLAB_SEED must be an integer")

    merged["seed"] = _as_int("seed", merged["seed"])
    if merged["out_dir"] is None:
        stem = pathlib.Path(str(merged["env"])).stem
        merged["out_dir"] = f"runs/{algo}-{stem}-s{merged['seed']}"

    cfg = RunConfig(**merged)
    _validate(cfg)
    return cfg


def _validate(cfg):
    if not isinstance(cfg.env, str) or not cfg.env:
        raise InvalidConfig("env must be a fixture name or game-file path")
    if not isinstance(cfg.out_dir, str) or not cfg.out_dir:
        raise InvalidConfig("out_dir must be a path")

    cfg.lr = _as_float("lr", cfg.lr)
    cfg.tau = _as_float("tau", cfg.tau)
    cfg.beta = _as_float("beta", cfg.beta)
    cfg.epsilon_start = _as_float("epsilon_start", cfg.epsilon_start)
    cfg.epsilon_end = _as_float("epsilon_end", cfg.epsilon_end)
    for name in ("total_steps", "batch_size", "buffer_capacity",
                 "target_update_interval", "eval_interval", "eval_episodes",
                 "embed_dim"):
        setattr(cfg, name, _as_int(name, getattr(cfg, name)))
        if getattr(cfg, name) < 1:
            raise InvalidConfig(f"{name} must be positive")
    cfg.epsilon_decay_steps = _as_int("epsilon_decay_steps", cfg.epsilon_decay_steps)
    if cfg.epsilon_decay_steps < 0:
        raise InvalidConfig("epsilon_decay_steps must be non-negative")

    if cfg.lr <= 0:
        raise InvalidConfig("lr must be positive")
    if not 0 < cfg.tau <= 1:
        raise InvalidConfig("tau must be in (0, 1]")
    for name in ("epsilon_start", "epsilon_end"):
        v = getattr(cfg, name)
        if not 0.0 <= v <= 1.0:
            raise InvalidConfig(f"{name} must be in [0, 1]")
    if cfg.gamma is not None:
        cfg.gamma = _as_float("gamma", cfg.gamma)
        if not 0.0 <= cfg.gamma <= 1.0:
            raise InvalidConfig("gamma must be in [0, 1]")
    if not isinstance(cfg.hidden_sizes, (list, tuple)):
        raise InvalidConfig("hidden_sizes must be a list of layer widths")
    cfg.hidden_sizes = [_as_int("hidden size", h) for h in cfg.hidden_sizes]
    if any(h < 1 for h in cfg.hidden_sizes):
        raise InvalidConfig("hidden sizes must be positive")
    if cfg.seed < 0:
        raise InvalidConfig("seed must be non-negative")


def check_compat(algo, env):
    """Reject algo/env pairings the learner cannot represent."""
    if algo in ("iql", "vdn", "qmix"):
        if not env.all_discrete():
            raise IncompatibleAlgoEnv(f"{algo} needs discrete action spaces")
        if algo != "iql" and not env.cooperative:
            raise IncompatibleAlgoEnv(
                f"{algo} factorizes one shared value; {env.name} is not cooperative")
    elif algo == "maddpg_dec":
        if not env.all_discrete():
            raise IncompatibleAlgoEnv(
                "decentralized targets model opponents with categorical "
                "distributions; continuous co-actors are not supported")
    elif algo == "selfplay":
        try:
            selfplay.check_selfplay_env(env)
        except (envs.NotZeroSum, envs.NotSymmetric) as e:
            raise IncompatibleAlgoEnv(str(e))
    elif algo in ("dial", "rial"):
        if not env.meta.get("comm"):
            raise IncompatibleAlgoEnv(f"{algo} needs a signalling fixture")


# ---------------------------------------------------------------------------
# artifact plumbing
# ---------------------------------------------------------------------------

def _digest(payload):
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _write_text(path, text):
    try:
        path.write_text(text)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}")


def _write_csv(path, header, rows):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}")


def _fmt(x):
    return "" if x is None else repr(float(x))


def _row(step, episodes, loss, eps, per_agent, extra):
    per_agent = [float(v) for v in per_agent]
    return [step, episodes, _fmt(loss), _fmt(eps),
            _fmt(float(np.mean(per_agent))),
            json.dumps(per_agent),
            json.dumps(extra, sort_keys=True) if extra else ""]


def _eval_rng(seed, step):
    return np.random.default_rng([seed, step])


def rollout_returns(env, policy_fn, episodes, gamma, rng):
    """Discounted per-agent returns, one row per episode."""
    totals = np.zeros((episodes, env.n_agents))
    for e in range(episodes):
        state = env.reset(rng)
        disc = 1.0
        while not state.done:
            joint = policy_fn(state, rng)
            state, rewards, _ = env.step(state, tuple(joint), rng)
            totals[e] += disc * np.asarray(rewards, dtype=np.float64)
            disc *= gamma
    return totals


# ---------------------------------------------------------------------------
# per-algo training loops
# ---------------------------------------------------------------------------

def _qfamily_mode(algo):
    return {"iql": "independent", "vdn": "vdn", "qmix": "qmix"}[algo]


def _train_qfamily(cfg, env, rng):
    learner = qmix.QmixLearner(
        env, _qfamily_mode(cfg.algo), rng, hidden=tuple(cfg.hidden_sizes),
        embed_dim=cfg.embed_dim, gamma=cfg.gamma, lr=cfg.lr,
        target_interval=cfg.target_update_interval)
    buf = ReplayBuffer(cfg.buffer_capacity)
    state = env.reset(rng)
    episodes, last_loss, rows = 0, None, []
    for step in range(1, cfg.total_steps + 1):
        eps = qmix.epsilon_at(step - 1, cfg.epsilon_start, cfg.epsilon_end,
                              cfg.epsilon_decay_steps)
        tr, state = qmix.collect_step(env, learner, state, eps, rng)
        episodes += int(tr.done)
        buf.push(tr)
        if len(buf) >= cfg.batch_size:
            last_loss = learner.td_update(buf.sample(cfg.batch_size, rng))
        if step % cfg.eval_interval == 0 or step == cfg.total_steps:
            totals = rollout_returns(env, lambda s, r: learner.greedy_joint(s),
                                     cfg.eval_episodes, learner.gamma,
                                     _eval_rng(cfg.seed, step))
            rows.append(_row(step, episodes, last_loss, eps,
                             totals.mean(axis=0), {}))
    payload = learner.to_checkpoint(config_echo=dataclasses.asdict(cfg))
    return rows, payload, {}


def _train_maddpg(cfg, env, rng):
    try:
        learner = maddpg.MaddpgLearner(
            env, rng, hidden=tuple(cfg.hidden_sizes), lr=cfg.lr, gamma=cfg.gamma,
            tau=cfg.tau, beta=cfg.beta, decentralized=(cfg.algo == "maddpg_dec"))
    except maddpg.ContinuousOpponent as e:
        raise IncompatibleAlgoEnv(str(e))
    buf = ReplayBuffer(cfg.buffer_capacity)
    state = env.reset(rng)
    episodes, last, rows = 0, {}, []
    for step in range(1, cfg.total_steps + 1):
        joint = learner.act(state, rng, explore=True)
        nxt, rewards, done = env.step(state, joint, rng)
        buf.push(JointTransition(state=state.index, actions=joint,
                                 rewards=tuple(float(r) for r in rewards),
                                 next_state=nxt.index, done=done))
        state = env.reset(rng) if done else nxt
        episodes += int(done)
        if len(buf) >= cfg.batch_size:
            last = learner.learner_step(buf.sample(cfg.batch_size, rng), rng)
        if step % cfg.eval_interval == 0 or step == cfg.total_steps:
            totals = rollout_returns(
                env, lambda s, r: learner.act(s, r, explore=False),
                cfg.eval_episodes, learner.gamma, _eval_rng(cfg.seed, step))
            extra = {k: float(v) for k, v in last.items()}
            rows.append(_row(step, episodes, last.get("critic_loss"), None,
                             totals.mean(axis=0), extra))
    payload = learner.to_checkpoint(config_echo=dataclasses.asdict(cfg))
    return rows, payload, {}


def _train_selfplay(cfg, env, rng, threads=1):
    run = selfplay.SelfPlayRun(env, lr=cfg.lr, batch_episodes=cfg.batch_size)
    episodes, rows = 0, []
    for step in range(1, cfg.total_steps + 1):
        reported = selfplay.selfplay_step(run, env, cfg.batch_size, rng,
                                          threads=threads)
        episodes += cfg.batch_size
        if step % cfg.eval_interval == 0 or step == cfg.total_steps:
            p = run.policy()
            erng = _eval_rng(cfg.seed, step)
            a, b, r1, r2 = selfplay._play_batch(env, p, p, cfg.eval_episodes, erng)
            coin = erng.random(cfg.eval_episodes) < 0.5
            m = float(np.where(coin, r1, r2).mean())
            uniform = np.full(run.k, 1.0 / run.k)
            extra = {"policy": [float(x) for x in p],
                     "tv_from_uniform": selfplay.total_variation(p, uniform),
                     "train_batch_mean": reported}
            rows.append(_row(step, episodes, run.last_loss, None, [m, -m], extra))
    payload = run.to_checkpoint(config_echo=dataclasses.asdict(cfg))
    return rows, payload, {}


def _comm_return_rows(env, gamma, acc):
    # the shared reward is 1 on the final step iff the listener matches the
    # bit, so the discounted per-agent return is gamma^(horizon-1) * accuracy
    ret = (gamma ** (env.horizon - 1)) * acc
    return [ret] * env.n_agents


def _train_dial(cfg, env, rng):
    system = dialmod.DialSystem(env, rng, net_hidden=tuple(cfg.hidden_sizes),
                                lr=cfg.lr)
    gamma = env.gamma if cfg.gamma is None else cfg.gamma
    episodes, last_loss, rows, comm_rows = 0, None, [], []
    for step in range(1, cfg.total_steps + 1):
        last_loss = system.train_step(cfg.batch_size, rng)
        episodes += cfg.batch_size
        if step % cfg.eval_interval == 0 or step == cfg.total_steps:
            acc = system.evaluate(cfg.eval_episodes, _eval_rng(cfg.seed, step))
            rows.append(_row(step, episodes, last_loss, None,
                             _comm_return_rows(env, gamma, acc),
                             {"accuracy": acc}))
            comm_rows.append([step, _fmt(last_loss), _fmt(acc)])
    payload = system.to_checkpoint(config_echo=dataclasses.asdict(cfg))
    return rows, payload, {"dial_metrics.csv": comm_rows}


def _train_rial(cfg, env, rng):
    system = dialmod.RialSystem(
        env, rng, net_hidden=tuple(cfg.hidden_sizes), lr=cfg.lr, gamma=cfg.gamma,
        target_interval=cfg.target_update_interval,
        buffer_capacity=cfg.buffer_capacity, batch_size=cfg.batch_size)
    episodes, last_loss, rows, comm_rows = 0, None, [], []
    for step in range(1, cfg.total_steps + 1):
        eps = qmix.epsilon_at(step - 1, cfg.epsilon_start, cfg.epsilon_end,
                              cfg.epsilon_decay_steps)
        loss = system.step(rng, eps)
        if loss is not None:
            last_loss = loss
        episodes += 1
        if step % cfg.eval_interval == 0 or step == cfg.total_steps:
            acc = system.evaluate(cfg.eval_episodes, _eval_rng(cfg.seed, step))
            rows.append(_row(step, episodes, last_loss, eps,
                             _comm_return_rows(env, system.gamma, acc),
                             {"accuracy": acc}))
            comm_rows.append([step, _fmt(last_loss), _fmt(acc)])
    payload = system.to_checkpoint(config_echo=dataclasses.asdict(cfg))
    return rows, payload, {"dial_metrics.csv": comm_rows}


def cmd_train(cfg, threads=1):
    env = envs.resolve_env(cfg.env)
    check_compat(cfg.algo, env)
    if threads != 1 and cfg.algo != "selfplay":
        raise InvalidConfig("--threads applies only to selfplay episode generation")
    if threads < 1:
        raise InvalidConfig("--threads must be at least 1")

    out = pathlib.Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {out}: {e}")
    _write_text(out / "config_echo.json",
                json.dumps(dataclasses.asdict(cfg), indent=1, sort_keys=True) + "\n")

    rng = np.random.default_rng(cfg.seed)
    if cfg.algo in ("iql", "vdn", "qmix"):
        rows, payload, extra_files = _train_qfamily(cfg, env, rng)
    elif cfg.algo in ("maddpg_ctde", "maddpg_dec"):
        rows, payload, extra_files = _train_maddpg(cfg, env, rng)
    elif cfg.algo == "selfplay":
        rows, payload, extra_files = _train_selfplay(cfg, env, rng, threads)
    elif cfg.algo == "dial":
        rows, payload, extra_files = _train_dial(cfg, env, rng)
    else:
        rows, payload, extra_files = _train_rial(cfg, env, rng)

    _write_csv(out / "metrics.csv", METRICS_HEADER, rows)
    for name, extra_rows in extra_files.items():
        _write_csv(out / name, ["step", "loss", "eval_accuracy"], extra_rows)
    checkpoint = {"format": "marlab-checkpoint-v1", "algo": cfg.algo,
                  "env": cfg.env, "payload": payload, "sha256": _digest(payload)}
    _write_text(out / "checkpoint.json", json.dumps(checkpoint, sort_keys=True))

    final = dict(zip(METRICS_HEADER, rows[-1]))
    print(json.dumps({"out_dir": str(out), "final_step": final["step"],
                      "eval_return_mean": final["eval_return_mean"]},
                     sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# eval subcommand
# ---------------------------------------------------------------------------

def _load_checkpoint_file(path):
    path = pathlib.Path(path)
    if not path.exists():
        raise IoError(f"no such checkpoint: {path}")
    try:
        blob = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ChecksumMismatch(f"malformed checkpoint {path}: {e}")
    for key in ("algo", "env", "payload", "sha256"):
        if key not in blob:
            raise ChecksumMismatch(f"checkpoint {path} is missing {key!r}")
    if _digest(blob["payload"]) != blob["sha256"]:
        raise ChecksumMismatch(f"checkpoint {path} failed its sha256 check")
    return blob


def _rebuild(cfg, env, rng):
    """Reconstruct an untrained learner shaped like the one that wrote the
    checkpoint; the caller then loads parameters into it."""
    algo = cfg.algo
    if algo in ("iql", "vdn", "qmix"):
        return qmix.QmixLearner(
            env, _qfamily_mode(algo), rng, hidden=tuple(cfg.hidden_sizes),
            embed_dim=cfg.embed_dim, gamma=cfg.gamma, lr=cfg.lr,
            target_interval=cfg.target_update_interval)
    if algo in ("maddpg_ctde", "maddpg_dec"):
        return maddpg.MaddpgLearner(
            env, rng, hidden=tuple(cfg.hidden_sizes), lr=cfg.lr, gamma=cfg.gamma,
            tau=cfg.tau, beta=cfg.beta, decentralized=(algo == "maddpg_dec"))
    if algo == "selfplay":
        return selfplay.SelfPlayRun(env, lr=cfg.lr, batch_episodes=cfg.batch_size)
    if algo == "dial":
        return dialmod.DialSystem(env, rng, net_hidden=tuple(cfg.hidden_sizes),
                                  lr=cfg.lr)
    return dialmod.RialSystem(
        env, rng, net_hidden=tuple(cfg.hidden_sizes), lr=cfg.lr, gamma=cfg.gamma,
        target_interval=cfg.target_update_interval,
        buffer_capacity=cfg.buffer_capacity, batch_size=cfg.batch_size)


def _summarize_returns(env, totals):
    per_agent = [float(v) for v in totals.mean(axis=0)]
    out = {"episodes": int(totals.shape[0]),
           "mean_return_per_agent": per_agent,
           "mean_return": float(np.mean(per_agent))}
    if env.zero_sum:
        tol = 1e-12
        out["win_rate_per_agent"] = [float((totals[:, i] > tol).mean())
                                     for i in range(env.n_agents)]
        out["draw_rate"] = float((np.abs(totals[:, 0]) <= tol).mean())
    return out


def evaluate_checkpoint(blob, env, episodes, seed):
    cfg = build_config(blob["payload"].get("config") or {})
    try:
        learner = _rebuild(cfg, env, np.random.default_rng(seed))
        learner.load_checkpoint(blob["payload"])
    except (envs.EnvError, qmix.QmixError, maddpg.MaddpgError,
            dialmod.DialError) as e:
        raise IncompatibleAlgoEnv(f"checkpoint does not fit {env.name}: {e}")
    gamma = env.gamma if cfg.gamma is None else cfg.gamma
    erng = _eval_rng(seed, 0)

    if cfg.algo in ("iql", "vdn", "qmix"):
        totals = rollout_returns(env, lambda s, r: learner.greedy_joint(s),
                                 episodes, learner.gamma, erng)
    elif cfg.algo in ("maddpg_ctde", "maddpg_dec"):
        totals = rollout_returns(env, lambda s, r: learner.act(s, r, explore=False),
                                 episodes, learner.gamma, erng)
    elif cfg.algo == "selfplay":
        p = learner.policy()
        a, b, r1, r2 = selfplay._play_batch(env, p, p, episodes, erng)
        totals = np.stack([r1, r2], axis=1)
    else:
        acc = learner.evaluate(episodes, erng)
        totals = np.tile(_comm_return_rows(env, gamma, acc), (episodes, 1))
        summary = _summarize_returns(env, totals)
        summary["accuracy"] = float(acc)
        summary["algo"] = cfg.algo
        return summary

    summary = _summarize_returns(env, totals)
    summary["algo"] = cfg.algo
    if cfg.algo == "selfplay":
        summary["policy"] = [float(x) for x in learner.policy()]
    return summary


def cmd_eval(args):
    blob = _load_checkpoint_file(args.checkpoint)
    env = envs.resolve_env(args.env or blob["env"])
    episodes = args.episodes
    summary = evaluate_checkpoint(blob, env, episodes, args.seed)
    text = json.dumps(summary, sort_keys=True)
    print(text)
    out = pathlib.Path(args.out) if args.out else \
        pathlib.Path(args.checkpoint).parent / "eval.json"
    _write_text(out, text + "\n")
    return 0


# ---------------------------------------------------------------------------
# oracle subcommand
# ---------------------------------------------------------------------------

def cmd_oracle(args):
    env = envs.resolve_env(args.game)
    sub = args.oracle_cmd
    if sub == "nash":
        if all(sp.n == 2 for sp in env.action_space):
            p1, p2, v = oracle.nash_2x2_zero_sum(env)
        else:
            p1, p2, v = oracle.nash_zero_sum_enumerate(env)
        out = {"mix1": [float(x) for x in p1], "mix2": [float(x) for x in p2],
               "value": float(v) + 0.0}
    elif sub == "argmax":
        if not env.cooperative:
            raise IncompatibleAlgoEnv("argmax scans a shared reward; "
                                      f"{env.name} is not cooperative")
        s = args.state
        joint, value = oracle.joint_argmax(
            lambda j: env.reward_vector(s, j)[0], env)
        out = {"state": s, "joint": [int(a) for a in joint], "value": float(value)}
    elif sub == "qiter":
        tab = oracle.tabular_q_iteration(env, gamma=args.gamma)
        out = {"gamma": float(tab.gamma),
               "value_per_state": [tab.value(s) for s in range(env.n_states)],
               "greedy_joint_per_state": [[int(a) for a in tab.greedy(s)]
                                          for s in range(env.n_states)]}
    else:
        mix = [float(x) for x in args.mix.split(",")]
        br, value = oracle.best_response_value(env, args.me, mix)
        out = {"me": args.me, "best_response": [float(x) for x in br],
               "action": int(np.argmax(br)), "value": float(value)}
    print(json.dumps(out, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# gradcheck subcommand
# ---------------------------------------------------------------------------

def ndiff_gradcheck_suite(instances=100, seed=1234):
    """Finite differences vs reverse-mode on random layered nets under three
    loss styles; returns the worst relative error.  Instance 0 is a fixed
    small net with an exponential-linear hidden layer so a broken backward
    rule for that activation is caught even at low instance counts."""
    rng = np.random.default_rng(seed)
    acts = ["relu", "elu", "tanh", "sigmoid"]
    worst = 0.0
    for trial in range(instances):
        if trial == 0:
            sizes = [3, 5, 2]
            layer_acts = ["elu", "identity"]
        else:
            depth = int(rng.integers(1, 4))
            sizes = [int(rng.integers(1, 9)) for _ in range(depth + 1)]
            layer_acts = [acts[int(rng.integers(0, 4))]
                          for _ in range(depth - 1)] + ["identity"]
        net = DenseNet(sizes, layer_acts, rng, name=f"g{trial}")
        x = np.asarray(rng.normal(size=(3, sizes[0])))
        target = np.asarray(rng.normal(size=(3, sizes[-1])))
        style = trial % 3

        def f():
            g = Graph()
            out = net.forward(g, g.constant(x))
            if style == 0:
                return g.mean(g.square(g.sub(out, g.constant(target))))
            if style == 1:
                return g.sum(g.mul(g.softmax(out), g.constant(target)))
            return g.mean(g.abs(g.tanh(out)))

        worst = max(worst, grad_check(f, net.params))
    return worst


def dial_gradcheck_suite(instances=100, seed=1234):
    """Finite differences vs reverse-mode through full communication unrolls,
    messages crossing agents between timesteps; returns the worst relative
    error."""
    rng = np.random.default_rng(seed)
    env = envs.signal_relay()
    worst = 0.0
    for case in range(instances):
        hidden_dim = int(rng.integers(1, 4))
        msg_dim = int(rng.integers(1, 3))
        net_hidden = [(), (4,)][case % 2]
        channel = "on" if case % 3 else "zeroed"
        system = dialmod.DialSystem(env, rng, msg_dim=msg_dim,
                                    hidden_dim=hidden_dim,
                                    net_hidden=net_hidden, channel=channel)
        for p in system.params():
            p.value[...] = rng.normal(scale=0.7, size=p.value.shape)
        bits = rng.integers(2, size=3)

        def f():
            u = system.unroll(None, np.random.default_rng(0), bits=bits)
            return system.loss_tensor(u)

        worst = max(worst, grad_check(f, system.params()))
    return worst


def cmd_gradcheck(args):
    t0 = time.perf_counter()
    suites = {"ndiff": ndiff_gradcheck_suite(args.instances),
              "dial_bptt": dial_gradcheck_suite(args.instances)}
    report = {
        "suites": {name: {"instances": args.instances,
                          "max_rel_error": float(err),
                          "pass": bool(err < GRADCHECK_TOL)}
                   for name, err in suites.items()},
        "threshold": GRADCHECK_TOL,
        "elapsed_seconds": round(time.perf_counter() - t0, 3),
    }
    report["pass"] = all(s["pass"] for s in report["suites"].values())
    print(json.dumps(report, sort_keys=True))
    return 0 if report["pass"] else 1


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--algo", choices=ALGOS)
    p.add_argument("--env", help="fixture name or game-file path")
    p.add_argument("--seed", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--total-steps", type=int, dest="total_steps")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--buffer-capacity", type=int, dest="buffer_capacity")
    p.add_argument("--target-update-interval", type=int,
                   dest="target_update_interval")
    p.add_argument("--tau", type=float)
    p.add_argument("--epsilon-start", type=float, dest="epsilon_start")
    p.add_argument("--epsilon-end", type=float, dest="epsilon_end")
    p.add_argument("--epsilon-decay-steps", type=int, dest="epsilon_decay_steps")
    p.add_argument("--hidden-sizes", dest="hidden_sizes",
                   help="comma-separated layer widths, e.g. 64,64")
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--beta", type=float)
    p.add_argument("--eval-interval", type=int, dest="eval_interval")
    p.add_argument("--eval-episodes", type=int, dest="eval_episodes")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for selfplay episode generation")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="marlab",
        description="desk-scale multi-agent reinforcement learning runs")
    sub = parser.add_subparsers(dest="cmd", required=True)

    _add_train_flags(sub.add_parser("train", help="run one training job"))

    e = sub.add_parser("eval", help="evaluate a saved checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--env", help="override the checkpoint's environment")
    e.add_argument("--episodes", type=int, default=500)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="where to write eval.json")

    o = sub.add_parser("oracle", help="query exact small-game solvers")
    osub = o.add_subparsers(dest="oracle_cmd", required=True)
    n = osub.add_parser("nash", help="zero-sum matrix equilibrium")
    n.add_argument("game")
    a = osub.add_parser("argmax", help="joint argmax of a shared reward")
    a.add_argument("game")
    a.add_argument("--state", type=int, default=0)
    q = osub.add_parser("qiter", help="tabular value iteration over joints")
    q.add_argument("game")
    q.add_argument("--gamma", type=float, default=None)
    b = osub.add_parser("bestresp", help="best pure reply to a frozen mix")
    b.add_argument("game")
    b.add_argument("--me", type=int, required=True)
    b.add_argument("--mix", required=True,
                   help="comma-separated opponent mix, e.g. 0.7,0.3")

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("--instances", type=int, default=100)
    return parser


def _config_from_args(args):
    file_dict = {}
    if args.config:
        path = pathlib.Path(args.config)
        if not path.exists():
            raise InvalidConfig(f"config file not found: {path}")
        try:
            file_dict = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise InvalidConfig(f"cannot parse config file: {e}")
        if not isinstance(file_dict, dict):
            raise InvalidConfig("config file must hold a JSON object")
    flags = {}
    for field in dataclasses.fields(RunConfig):
        v = getattr(args, field.name, None)
        if v is not None:
            flags[field.name] = v
    if isinstance(flags.get("hidden_sizes"), str):
        text = flags["hidden_sizes"].strip()
        try:
            flags["hidden_sizes"] = [int(t) for t in text.split(",") if t] if text else []
        except ValueError:
            raise InvalidConfig(f"bad --hidden-sizes value: {text!r}")
    return build_config(file_dict, flags)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.cmd == "train":
            return cmd_train(_config_from_args(args), args.threads)
        if args.cmd == "eval":
            return cmd_eval(args)
        if args.cmd == "oracle":
            return cmd_oracle(args)
        return cmd_gradcheck(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (envs.EnvError, oracle.OracleError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (qmix.QmixError, maddpg.MaddpgError, dialmod.DialError,
            ndiff.NdiffError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
