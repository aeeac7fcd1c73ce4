"""Replay buffer and a DDPG agent on numpy networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mlp import Adam, Mlp


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling from the filled part."""

    def __init__(self, capacity, obs_dim, act_dim, seed=0):
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.act = np.zeros((self.capacity, act_dim))
        self.rew = np.zeros(self.capacity)
        self.next_obs = np.zeros((self.capacity, obs_dim))
        self.done = np.zeros(self.capacity)
        self.size = 0
        self.ptr = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return self.size

    def add(self, obs, act, rew, next_obs, done):
        i = self.ptr
        self.obs[i], self.act[i], self.rew[i] = obs, act, rew
        self.next_obs[i], self.done[i] = next_obs, float(done)
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch):
        if self.size == 0:
            raise ValueError("empty buffer")
        return self.rng.integers(0, self.size, size=batch)

    def sample(self, batch):
        idx = self.sample_indices(batch)
        return self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx]


@dataclass
class DdpgHyper:
    batch: int = 64
    buffer: int = 100_000
    gamma: float = 0.99
    tau: float = 0.005
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    hidden: tuple = (64, 64)
    # penalty on the actor's output pre-activation; keeps tanh out of saturation
    actor_reg: float = 0.0


class NumericalAbort(FloatingPointError):
    pass


class DdpgAgent:
    """Actor outputs lie in [-1, 1] (tanh); callers scale them to physical units.

    The critic sees the observation and the unit-scaled action.
    """

    def __init__(self, obs_dim, act_dim, hyper: DdpgHyper | None = None, seed=0,
                 actor_out_scale=1e-3):
        self.hyper = hyper or DdpgHyper()
        h = list(self.hyper.hidden)
        rng = np.random.default_rng(seed)
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.actor = Mlp([obs_dim, *h, act_dim], ["tanh"] * len(h) + ["tanh"], rng,
                         out_scale=actor_out_scale)
        self.critic = Mlp([obs_dim + act_dim, *h, 1], rng=rng)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam([p.shape for p in self.actor.params()], lr=self.hyper.lr_actor)
        self.critic_opt = Adam([p.shape for p in self.critic.params()], lr=self.hyper.lr_critic)
        self.updates = 0

    def act(self, obs):
        return self.actor(np.atleast_2d(obs))[0]

    def critic_loss_and_grad(self, obs, act, target):
        """Mean squared TD error and its gradient w.r.t. the critic parameters."""
        q, cache = self.critic.forward(np.hstack([obs, act]))
        err = q[:, 0] - target
        loss = float(np.mean(err ** 2))
        gW, gb, _ = self.critic.backward(cache, (2.0 / len(err)) * err[:, None])
        return loss, gW, gb

    def actor_objective_and_grad(self, obs):
        """Mean Q(s, pi(s)) and its gradient w.r.t. the actor parameters."""
        a, acache = self.actor.forward(obs)
        q, ccache = self.critic.forward(np.hstack([obs, a]))
        _, _, dx = self.critic.backward(ccache, np.full_like(q, 1.0 / len(q)))
        da = dx[:, self.obs_dim:]
        obj = float(np.mean(q))
        reg = self.hyper.actor_reg
        if reg > 0:
            # d/da of -reg * atanh(a)^2, averaged over the batch
            ac = np.clip(a, -1 + 1e-12, 1 - 1e-12)
            z = np.arctanh(ac)
            obj -= reg * float(np.mean(np.sum(z * z, axis=1)))
            da = da - (2.0 * reg / len(a)) * z / (1.0 - ac * ac)
        gW, gb, _ = self.actor.backward(acache, da)
        return obj, gW, gb

    def update(self, buffer: ReplayBuffer):
        hp = self.hyper
        obs, act, rew, nobs, done = buffer.sample(hp.batch)
        na = self.actor_target(nobs)
        q_next = self.critic_target(np.hstack([nobs, na]))[:, 0]
        target = rew + hp.gamma * (1.0 - done) * q_next
        closs, cgW, cgb = self.critic_loss_and_grad(obs, act, target)
        _, agW, agb = self.actor_objective_and_grad(obs)
        grads = [*cgW, *cgb, *agW, *agb]
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise NumericalAbort("non-finite gradient in DDPG update")
        self.critic_opt.step(self.critic.params(), [*cgW, *cgb])
        self.actor_opt.step(self.actor.params(), [-g for g in [*agW, *agb]])
        self.actor_target.soft_update(self.actor, hp.tau)
        self.critic_target.soft_update(self.critic, hp.tau)
        self.updates += 1
        return closs
