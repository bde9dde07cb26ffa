"""Soft actor-critic trainer for the teacher policy.

Implements the standard practical losses for the maximum-entropy
objective: soft Bellman residuals on twin critics with clipped-double-Q
targets, a reparameterized actor objective, and automatic temperature
adaptation toward a target entropy.  The partition function of the
energy-based target distribution never needs to be evaluated.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .env import InverterEnv, Transition
from .nn import Adam, CriticNet, GaussianPolicyNet, MlpSpec


@dataclass(frozen=True)
class SacConfig:
    episodes: int = 500
    gamma: float = 0.9
    lr: float = 1e-3
    batch: int = 256
    ts: float = 1e-4
    target_entropy: float = -13.0
    tau: float = 5e-3
    buffer_capacity: int = 200_000
    warmup_steps: int = 1000
    seed: int = 0
    actor_hidden: tuple[int, ...] = (128, 64, 64)
    critic_path_width: int = 64
    critic_fusion_hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must be in (0, 1)")
        if self.batch > self.buffer_capacity:
            raise ValueError("batch size cannot exceed buffer capacity")


class TrainingAborted(RuntimeError):
    """Raised when an update produces a non-finite loss; carries diagnostics."""

    def __init__(self, step: int, losses: dict):
        super().__init__(f"non-finite loss at update {step}: {losses}")
        self.step = step
        self.losses = losses


class ReplayBuffer:
    """Fixed-capacity ring of transitions in preallocated arrays."""

    def __init__(self, capacity: int, obs_dim: int = 6, act_dim: int = 2):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.pos = 0
        self.size = 0

    def push(self, tr: Transition) -> None:
        i = self.pos
        self.obs[i] = tr.obs
        self.act[i] = tr.action
        self.rew[i] = tr.reward
        self.next_obs[i] = tr.next_obs
        self.done[i] = 1.0 if tr.done else 0.0
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        if self.size < batch:
            raise ValueError("not enough transitions buffered to sample")
        idx = rng.integers(0, self.size, size=batch)
        return (self.obs[idx], self.act[idx], self.rew[idx],
                self.next_obs[idx], self.done[idx])

    def __len__(self):
        return self.size


class SacAgent:
    """Actor, twin critics with targets, and the learnable temperature."""

    def __init__(self, cfg: SacConfig, obs_dim: int = 6, act_dim: int = 2,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.actor = GaussianPolicyNet(
            MlpSpec(obs_dim, cfg.actor_hidden, act_dim), rng)
        kw = dict(path_width=cfg.critic_path_width,
                  fusion_hidden=cfg.critic_fusion_hidden)
        self.q1 = CriticNet(obs_dim, act_dim, rng=rng, **kw)
        self.q2 = CriticNet(obs_dim, act_dim, rng=rng, **kw)
        self.q1_target = copy.deepcopy(self.q1)
        self.q2_target = copy.deepcopy(self.q2)
        self.log_alpha = np.zeros(1)
        self.opt_actor = Adam(self.actor.parameters(), lr=cfg.lr)
        self.opt_q1 = Adam(self.q1.parameters(), lr=cfg.lr)
        self.opt_q2 = Adam(self.q2.parameters(), lr=cfg.lr)
        self.opt_alpha = Adam([self.log_alpha], lr=cfg.lr)
        self.sample_rng = rng

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    def select_action(self, obs, deterministic: bool = False,
                      rng: np.random.Generator | None = None) -> np.ndarray:
        if deterministic:
            return self.actor.deterministic(obs)
        rng = rng or self.sample_rng
        a, *_ = self.actor.sample(obs, rng)
        return a

    def update(self, batch) -> dict:
        """One gradient step on critics, actor and temperature."""
        cfg = self.cfg
        s, a, r, s2, d = batch
        n = s.shape[0]
        alpha = self.alpha

        # clipped double-Q soft Bellman target
        a2, logp2, *_ = self.actor.sample(s2, self.sample_rng)
        q1t, _ = self.q1_target.forward(s2, a2)
        q2t, _ = self.q2_target.forward(s2, a2)
        y = r + cfg.gamma * (1.0 - d) * (np.minimum(q1t, q2t) - alpha * logp2)

        losses = {}
        for name, critic, opt in (("q1_loss", self.q1, self.opt_q1),
                                  ("q2_loss", self.q2, self.opt_q2)):
            q, cache = critic.forward(s, a)
            err = q - y
            losses[name] = float(np.mean(err**2))
            grads, _, _ = critic.backward(cache, 2.0 * err / n)
            opt.step(critic.parameters(), grads)

        # reparameterized actor objective: mean(alpha*logp - min Q)
        a_new, logp, eps, cache, mu, std = self.actor.sample(s, self.sample_rng)
        qa1, c1 = self.q1.forward(s, a_new)
        qa2, c2 = self.q2.forward(s, a_new)
        qmin = np.minimum(qa1, qa2)
        actor_loss = float(np.mean(alpha * logp - qmin))
        mask1 = (qa1 <= qa2).astype(float)
        da1 = self.q1.action_grad(c1, -mask1 / n)
        da2 = self.q2.action_grad(c2, -(1.0 - mask1) / n)
        dq_da = da1 + da2                      # d(-mean qmin)/d action
        one_m_a2 = 1.0 - a_new**2
        squash = 2.0 * a_new * one_m_a2 / (one_m_a2 + 1e-6)   # dlogp/du
        d_mu = (alpha / n) * squash + dq_da * one_m_a2
        d_std = (alpha / n) * (squash * eps - 1.0 / std) + dq_da * one_m_a2 * eps
        actor_grads = self.actor.backward(cache, d_mu, d_std)
        self.opt_actor.step(self.actor.parameters(), actor_grads)

        # temperature toward the target entropy (logp detached)
        alpha_err = float(np.mean(logp) + cfg.target_entropy)
        losses["alpha_loss"] = -float(self.log_alpha[0]) * alpha_err
        self.opt_alpha.step([self.log_alpha], [np.array([-alpha_err])])

        self.soft_update(cfg.tau)
        losses["actor_loss"] = actor_loss
        losses["alpha"] = self.alpha
        return losses

    def soft_update(self, tau: float) -> None:
        for target, live in ((self.q1_target, self.q1), (self.q2_target, self.q2)):
            for tp, lp in zip(target.parameters(), live.parameters()):
                tp *= 1.0 - tau
                tp += tau * lp


LOG_COLUMNS = ("episode", "return", "r1_mean", "r2_mean", "r3_mean",
               "r4_mean", "alpha", "q_loss", "actor_loss")


@dataclass
class TrainResult:
    best: GaussianPolicyNet
    final: GaussianPolicyNet
    best_return: float
    log_rows: list


def train(env: InverterEnv, cfg: SacConfig) -> TrainResult:
    """Run cfg.episodes of interleaved rollout and learning.

    Uniform random actions before warmup; one update per step after.
    Takes ownership of the env (its RNG is reseeded from cfg.seed so the
    whole run is a function of the config).  Returns the best-return and
    final actors plus per-episode log rows.
    """
    root = np.random.SeedSequence(cfg.seed)
    ss_init, ss_env, ss_warmup, ss_agent = root.spawn(4)
    env.rng = np.random.default_rng(ss_env)
    agent = SacAgent(cfg, rng=np.random.default_rng(ss_init))
    agent.sample_rng = np.random.default_rng(ss_agent)
    warmup_rng = np.random.default_rng(ss_warmup)
    buffer = ReplayBuffer(cfg.buffer_capacity)

    log_rows = []
    best_return = -np.inf
    best = copy.deepcopy(agent.actor)
    total_steps = 0
    n_updates_total = 0

    for episode in range(cfg.episodes):
        obs = env.reset().normalized
        ep_return = 0.0
        comp_sums = np.zeros(4)
        loss_sums = {"q_loss": 0.0, "actor_loss": 0.0}
        n_steps = 0
        n_updates = 0
        alpha_last = agent.alpha
        done = False
        while not done:
            if total_steps < cfg.warmup_steps:
                action = warmup_rng.uniform(-1.0, 1.0, size=2)
            else:
                action = agent.select_action(obs)
            tr, br = env.step(action)
            buffer.push(tr)
            obs = tr.next_obs
            done = tr.done
            ep_return += tr.reward
            comp_sums += (br.r1, br.r2, br.r3, br.r4)
            n_steps += 1
            total_steps += 1
            if total_steps > cfg.warmup_steps and len(buffer) >= cfg.batch:
                losses = agent.update(buffer.sample(cfg.batch, agent.sample_rng))
                n_updates_total += 1
                if not all(np.isfinite(v) for v in losses.values()):
                    raise TrainingAborted(n_updates_total, losses)
                loss_sums["q_loss"] += 0.5 * (losses["q1_loss"] + losses["q2_loss"])
                loss_sums["actor_loss"] += losses["actor_loss"]
                alpha_last = losses["alpha"]
                n_updates += 1
        row = {
            "episode": episode,
            "return": ep_return,
            "r1_mean": comp_sums[0] / n_steps,
            "r2_mean": comp_sums[1] / n_steps,
            "r3_mean": comp_sums[2] / n_steps,
            "r4_mean": comp_sums[3] / n_steps,
            "alpha": alpha_last,
            "q_loss": loss_sums["q_loss"] / max(n_updates, 1),
            "actor_loss": loss_sums["actor_loss"] / max(n_updates, 1),
        }
        log_rows.append(row)
        if ep_return > best_return:
            best_return = ep_return
            best = copy.deepcopy(agent.actor)

    return TrainResult(best=best, final=agent.actor,
                       best_return=best_return, log_rows=log_rows)


def write_training_log(rows, path) -> None:
    """Training log CSV; floats printed with %.17g for byte stability."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in rows:
            fields = [str(row["episode"])]
            fields += [format(float(row[c]), ".17g") for c in LOG_COLUMNS[1:]]
            fh.write(",".join(fields) + "\n")
