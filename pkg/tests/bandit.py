"""One-query bandit: exactly one pool term earns reward 1."""
import numpy as np

from qreform.agents import (CandidatePool, MovingAverage, N_FEATURES, Policy, PolicyConfig,
                            init_policy, reinforce_step)
from qreform.nn import make_optimizer


class BanditEnv:
    def __init__(self, q0, good):
        self.q0, self.good = list(q0), good

    def reward(self, qid, q):
        return 1.0 if q[len(self.q0):] == [self.good] else 0.0


def make_bandit(seed=0, n_terms=5, t_max=1):
    rng = np.random.default_rng(seed)
    vocab = {f"w{i}": i for i in range(n_terms + 1)}
    pool = CandidatePool([f"w{i}" for i in range(1, n_terms + 1)],
                         np.arange(1, n_terms + 1), rng.uniform(0, 1, size=(n_terms, N_FEATURES)))
    cfg = PolicyConfig(vocab_size=len(vocab), embed_dim=4, t_max=t_max)
    policy = Policy(init_policy(cfg, rng), cfg, vocab)
    return policy, pool, ["w0"]


def first_step_probs(policy, pool, q0):
    logits = policy.term_logits(q0, pool)
    a = np.append(logits, policy.stop_logit(0))
    e = np.exp(a - a.max())
    return e / e.sum()


def run_bandit(seed=0, max_steps=500, lr=0.05, good_index=2, target=0.9):
    """Train until P(good term) > target; returns (steps used, final probability)."""
    policy, pool, q0 = make_bandit(seed)
    env = BanditEnv(q0, pool.terms[good_index])
    opt = make_optimizer("adam", lr)
    rng = np.random.default_rng(seed)
    base = MovingAverage(0.99)
    for step in range(1, max_steps + 1):
        reinforce_step(policy, [("q", q0)], env, {"q": pool}, 8, base, opt, rng)
        p = first_step_probs(policy, pool, q0)[good_index]
        if p > target:
            return step, float(p)
    return max_steps, float(first_step_probs(policy, pool, q0)[good_index])
