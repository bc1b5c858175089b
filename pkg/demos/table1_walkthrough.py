"""
A two-step certificate by hand
==============================

The toy MDP starts at s0 = 1, moves by s' = s + a + e with e ~ N(0, 1) and
pays r = s + a. The policy copies what it observes, pi(s) = s, and an
adversary may shift each observation by up to 0.5.
"""

import numpy as np

from certrl.certify import CertConfig, abstract_rollout, wcar
from certrl.envs import PerturbationSpec, rollout, table1_env, table1_policy

env = table1_env()
policy = table1_policy()
model = env.as_model()          # white-box: the environment is its own model

# A few fixed adversaries, with the transition noise switched off.
zero = np.zeros((2, 1))
for name, shifts in [("no attack", (0.0, 0.0)), ("adv-1", (0.1, -0.4)), ("adv-2", (-0.2, -0.3))]:
    ret = rollout(env, policy, [1.0], zero, zero, lambda t, s: s + shifts[t])
    print(f"{name:10s} shifts {shifts}  return {ret:.3f}")

# One abstract rollout covers every adversary at once.
trace = abstract_rollout(policy, model, [1.0], PerturbationSpec(0.5), 2, noise=(zero, zero))
for t, step in enumerate(trace.steps):
    print(f"step {t}: state [{step.s_orig.lo[0]:.2f}, {step.s_orig.hi[0]:.2f}]  "
          f"observed [{step.s_obs.lo[0]:.2f}, {step.s_obs.hi[0]:.2f}]  "
          f"reward [{step.r.lo[0]:.2f}, {step.r.hi[0]:.2f}]")
print(f"return interval [{trace.R_min.lo[0]:.2f}, {trace.R_min.hi[0]:.2f}]")

# Averaging the lower end over sampled noise gives the worst-case accumulative reward.
res = wcar(policy, model, env, CertConfig(N=1000, T=2, epsilon_test=0.5), rng=0)
print(f"WCAR over 1000 noise draws: {res.wcar:.3f} (sample variance {res.variance:.3f})")
