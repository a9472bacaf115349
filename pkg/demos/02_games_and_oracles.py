"""Tour of the bundled small games and the exact solvers that anchor every
learning result in this package: Nash mixes for zero-sum matrix games, best
responses, exhaustive joint argmax, tabular Q-iteration, and the one-agent
MDP induced by freezing everyone else.

Run from the repo root:  python3 demos/02_games_and_oracles.py
"""

import numpy as np

from marlab import envs, oracle

# -- matching pennies: a zero-sum game with no pure equilibrium ---------------
env = envs.matching_pennies()
print("matching_pennies payoff to seat 1 (rows = seat 1 action):")
for a in range(2):
    print("  ", [float(env.reward_vector(0, (a, b))[0]) for b in range(2)])

mix1, mix2, value = oracle.nash_2x2_zero_sum(env)
print("Nash mixes:", mix1, mix2, " game value:", value)

# any frozen strategy away from the mix is punishable; the oracle reports the
# best response and its payoff
br, v = oracle.best_response_value(env, me=1, frozen_mix=np.array([0.7, 0.3]))
print("vs a 0.7-heads seat 1: seat 2 best response", br, "earns", round(v, 3))

# -- coop_climb: a cooperative one-shot with a deceptive local optimum --------
climb = envs.coop_climb()
joint, best = oracle.joint_argmax(
    lambda j: climb.reward_vector(0, j)[0], climb)
print("\ncoop_climb optimum:", joint, "reward", best)
for j in envs.enumerate_joint_actions(climb):
    print("  joint", j, "->", climb.reward_vector(0, j)[0])

# -- two_step_coop: payoff arrives after a committed first move ---------------
two = envs.two_step_coop()
tab = oracle.tabular_q_iteration(two)
print("\ntwo_step_coop optimal values per state:",
      [round(tab.value(s), 3) for s in range(two.n_states)])
print("greedy joint per state:",
      [tab.greedy(s) for s in range(two.n_states)])
print("state 0 value is gamma * 10 =", round(two.gamma * 10.0, 3),
      "because the payoff lands one step later")

# -- freezing the opponent turns a game into a plain MDP ----------------------
opp = np.array([[0.7, 0.3]])     # seat 2 plays heads with p=0.7
mdp = envs.induce_mdp(env, 0, {1: opp})
tab = oracle.tabular_q_iteration(mdp)
print("\npennies with seat 2 frozen at 0.7 heads, seat 1 Q-values:", tab.q[0])
print("matching beats mixing: expected payoffs are 0.7-0.3 = 0.4 for heads,"
      " 0.3-0.7 = -0.4 for tails")
