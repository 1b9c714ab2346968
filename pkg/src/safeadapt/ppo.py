"""PPO with GAE on the grid environments, and safety finetuning of the actor.

Actor and critic are separate MLPs with separate Adam optimizers. The actor's
logits feed a softmax policy (inverse temperature 1 during training); the
critic outputs one scalar. Gradients are clipped by their joint global norm.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .envs import GridEnv, SafetyDataset
from .optim import Adam, clip_global_norm
from .policy_net import (
    MlpSpec,
    ParamVector,
    backward,
    forward,
    forward_cache,
    log_softmax,
    orthogonal_init,
)
from .rashomon import CertificationRefused, delta_star, search_inverse_temperature

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class PpoConfig:
    rollout_steps: int = 256
    n_epochs: int = 8
    minibatch_size: int = 64
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    learning_rate: float = 3e-4
    max_grad_norm: float = 0.5
    adam_eps: float = 1e-5
    max_timesteps: int = 500_000
    early_stop: bool = True
    early_stop_threshold: float = 1.0
    eval_episodes: int = 1
    eval_every: int = 0  # steps between early-stop checks; 0 = after every rollout

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("GAE lambda must lie in [0, 1]")
        if self.clip_range <= 0:
            raise ValueError("clip range must be positive")
        if min(self.rollout_steps, self.n_epochs, self.minibatch_size) <= 0:
            raise ValueError("rollout, epochs and minibatch must be positive")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    advantages: np.ndarray = field(default=None)
    returns: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.obs)
        for name in ("actions", "rewards", "dones", "log_probs", "values"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"buffer field {name} has inconsistent length")

    def __len__(self) -> int:
        return len(self.obs)


def gae(rewards, values, dones, bootstrap_value: float, gamma: float, lam: float):
    """Generalized advantage estimates and returns.

    ``dones[t]`` marks that the episode ended with transition ``t``; no value is
    bootstrapped across it.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not len(rewards) == len(values) == len(dones):
        raise ValueError("rewards, values and dones must have equal lengths")
    adv = np.zeros_like(rewards)
    last = 0.0
    next_value = bootstrap_value
    for t in range(len(rewards) - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


def greedy_episode(actor: ParamVector, env: GridEnv, start=None):
    """One greedy rollout: ``(total_reward, success, any_unsafe, states)``."""
    state = env.initial_state() if start is None else start
    total, unsafe, states = 0.0, False, []
    cache = {}
    while not env.is_terminal(state):
        states.append(state)
        key = state.key()
        if key not in cache:
            cache[key] = int(np.argmax(forward(actor, actor.spec, env.encode(state))))
        out = env.step(state, cache[key])
        total += out.reward
        unsafe |= out.unsafe
        state = out.next
        if out.done:
            return total, out.success, unsafe, states
    return total, False, unsafe, states


def greedy_reward(actor: ParamVector, env: GridEnv, episodes: int = 1) -> float:
    return float(np.mean([greedy_episode(actor, env)[0] for _ in range(episodes)]))


def critic_spec(actor_spec: MlpSpec) -> MlpSpec:
    return MlpSpec(actor_spec.input_dim, actor_spec.hidden, 1)


def init_actor_critic(spec: MlpSpec, rng: np.random.Generator):
    actor = orthogonal_init(spec, rng, output_gain=0.01)
    critic = orthogonal_init(critic_spec(spec), rng, output_gain=1.0)
    return actor, critic


class PpoLearner:
    """Rollout collection and clipped-surrogate updates for one actor/critic pair.

    ``actor_penalty(values) -> (loss, grad)`` is added to the actor loss on
    every minibatch; ``after_actor_step(values)`` runs right after each actor
    optimizer step and may modify the parameters in place.
    """

    def __init__(self, actor: ParamVector, critic: ParamVector, env: GridEnv,
                 config: PpoConfig, rng: np.random.Generator,
                 actor_penalty: Callable | None = None,
                 after_actor_step: Callable | None = None):
        self.actor = actor
        self.critic = critic
        self.env = env
        self.config = config
        self.rng = rng
        self.actor_penalty = actor_penalty
        self.after_actor_step = after_actor_step
        self.actor_opt = Adam(lr=config.learning_rate, eps=config.adam_eps)
        self.critic_opt = Adam(lr=config.learning_rate, eps=config.adam_eps)
        self.state = env.initial_state()
        self.episode_return = 0.0
        self.finished_returns: list[float] = []
        self.timesteps = 0

    def collect(self, n_steps: int) -> RolloutBuffer:
        env, actor, critic = self.env, self.actor, self.critic
        d = env.obs_dim
        obs = np.zeros((n_steps, d))
        actions = np.zeros(n_steps, dtype=np.int64)
        rewards = np.zeros(n_steps)
        dones = np.zeros(n_steps, dtype=bool)
        log_probs = np.zeros(n_steps)
        values = np.zeros(n_steps)
        # parameters are fixed during a rollout, so outputs can be cached per state
        cache = {}

        def lookup(state):
            key = state.key()
            if key not in cache:
                x = env.encode(state)
                lp = log_softmax(forward(actor, actor.spec, x))
                cache[key] = (x, lp, float(forward(critic, critic.spec, x)[0]))
            return cache[key]

        for t in range(n_steps):
            x, lp, v = lookup(self.state)
            cdf = np.cumsum(np.exp(lp))
            a = min(int(np.searchsorted(cdf, self.rng.random() * cdf[-1], side="right")), 3)
            out = env.step(self.state, a)
            obs[t], actions[t], rewards[t], dones[t] = x, a, out.reward, out.done
            log_probs[t], values[t] = lp[a], v
            self.episode_return += out.reward
            if out.done:
                self.finished_returns.append(self.episode_return)
                self.episode_return = 0.0
                self.state = env.initial_state()
            else:
                self.state = out.next
        self.timesteps += n_steps
        bootstrap = lookup(self.state)[2]
        buf = RolloutBuffer(obs, actions, rewards, dones, log_probs, values)
        buf.advantages, buf.returns = gae(rewards, values, dones, bootstrap,
                                          self.config.gamma, self.config.gae_lambda)
        return buf

    def update(self, buf: RolloutBuffer) -> dict:
        return ppo_update(self.actor, self.critic, buf, self.config, self.rng,
                          self.actor_opt, self.critic_opt, self.actor_penalty,
                          self.after_actor_step)


def ppo_loss_and_grads(actor: ParamVector, critic: ParamVector, obs, actions, old_log_probs,
                       advantages, returns, config: PpoConfig):
    """Minibatch loss ``pg + vf*mse - ent*entropy`` and flat gradients."""
    B = len(obs)
    logits, a_cache = forward_cache(actor, actor.spec, obs)
    lp_all = log_softmax(logits)
    p = np.exp(lp_all)
    lp = lp_all[np.arange(B), actions]
    ratio = np.exp(lp - old_log_probs)
    clipped = np.clip(ratio, 1.0 - config.clip_range, 1.0 + config.clip_range)
    s1 = ratio * advantages
    s2 = clipped * advantages
    pg_loss = -np.mean(np.minimum(s1, s2))
    entropy = -np.sum(p * lp_all, axis=1)
    ent_mean = float(entropy.mean())

    values, c_cache = forward_cache(critic, critic.spec, obs)
    values = values[:, 0]
    v_loss = float(np.mean((returns - values) ** 2))
    loss = pg_loss + config.vf_coef * v_loss - config.ent_coef * ent_mean

    d_lp = np.where(s1 <= s2, -advantages * ratio, 0.0) / B
    onehot = np.zeros_like(p)
    onehot[np.arange(B), actions] = 1.0
    g_logits = d_lp[:, None] * (onehot - p)
    g_logits += config.ent_coef * p * (lp_all + entropy[:, None]) / B
    g_actor = backward(actor, actor.spec, a_cache, g_logits)
    g_values = config.vf_coef * 2.0 * (values - returns) / B
    g_critic = backward(critic, critic.spec, c_cache, g_values[:, None])
    stats = {
        "loss": float(loss),
        "pg_loss": float(pg_loss),
        "value_loss": v_loss,
        "entropy": ent_mean,
        "approx_kl": float(np.mean((ratio - 1.0) - np.log(ratio))),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > config.clip_range)),
    }
    return stats, g_actor, g_critic


def ppo_update(actor: ParamVector, critic: ParamVector, buf: RolloutBuffer, config: PpoConfig,
               rng: np.random.Generator, actor_opt: Adam | None = None,
               critic_opt: Adam | None = None, actor_penalty: Callable | None = None,
               after_actor_step: Callable | None = None) -> dict:
    """Several epochs of minibatch updates; parameters change in place."""
    actor_opt = actor_opt or Adam(lr=config.learning_rate, eps=config.adam_eps)
    critic_opt = critic_opt or Adam(lr=config.learning_rate, eps=config.adam_eps)
    adv = buf.advantages
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(buf)
    totals: dict[str, float] = {}
    count = 0
    for _ in range(config.n_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            stats, g_a, g_c = ppo_loss_and_grads(
                actor, critic, buf.obs[idx], buf.actions[idx], buf.log_probs[idx],
                adv[idx], buf.returns[idx], config,
            )
            if actor_penalty is not None:
                pen, g_pen = actor_penalty(actor.values)
                stats["penalty"] = float(pen)
                stats["loss"] += float(pen)
                g_a = g_a + g_pen
            if not (np.isfinite(stats["loss"]) and np.all(np.isfinite(g_a))
                    and np.all(np.isfinite(g_c))):
                raise NumericalError(f"non-finite PPO loss or gradient: {stats}")
            stats["grad_norm"] = clip_global_norm([g_a, g_c], config.max_grad_norm)
            actor_opt.step(actor.values, g_a)
            critic_opt.step(critic.values, g_c)
            if after_actor_step is not None:
                after_actor_step(actor.values)
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    return {k: v / count for k, v in totals.items()}


def train_source(env: GridEnv, hidden: tuple[int, ...], config: PpoConfig,
                 rng: np.random.Generator):
    """PPO on the source task with greedy-reward early stopping.

    Returns ``(actor, critic, log_rows)``.
    """
    spec = MlpSpec(env.obs_dim, tuple(hidden), env.n_actions)
    actor, critic = init_actor_critic(spec, rng)
    learner = PpoLearner(actor, critic, env, config, rng)
    rows = []
    next_eval = config.eval_every
    while learner.timesteps < config.max_timesteps:
        n = min(config.rollout_steps, config.max_timesteps - learner.timesteps)
        buf = learner.collect(n)
        stats = learner.update(buf) if n == config.rollout_steps else {}
        recent = learner.finished_returns[-20:]
        row = {"step": learner.timesteps,
               "mean_episode_reward": float(np.mean(recent)) if recent else float("nan"),
               "greedy_eval_reward": float("nan"), **stats}
        if learner.timesteps >= next_eval:
            next_eval += config.eval_every
            row["greedy_eval_reward"] = greedy_reward(actor, env, config.eval_episodes)
            if config.early_stop and row["greedy_eval_reward"] >= config.early_stop_threshold:
                rows.append(row)
                break
        rows.append(row)
    return actor, critic, rows


@dataclass
class FinetuneConfig:
    mode: str = "allowed"  # "allowed" (log-prob of allowed actions) or "multilabel" (BCE)
    learning_rate: float = 1e-2
    max_epochs: int = 3000
    batch_size: int = 0  # 0 = full batch
    loss_tol: float = 0.05
    include_trajectory: bool = True
    beta_range: tuple[float, float] = (10.0, 1000.0)
    beta_grid: int = 32

    def __post_init__(self):
        if self.mode not in ("allowed", "multilabel"):
            raise ValueError(f"unknown finetune mode {self.mode!r}")
        self.beta_range = tuple(float(b) for b in self.beta_range)

    def to_json(self) -> dict:
        d = asdict(self)
        d["beta_range"] = list(self.beta_range)
        return d


def critical_state_rate(actor: ParamVector, dataset: SafetyDataset) -> float:
    greedy = np.argmax(forward(actor, actor.spec, dataset.states), axis=1)
    return float(dataset.masks[np.arange(len(dataset)), greedy].mean())


def _finetune_targets(actor, dataset, env, include_trajectory):
    X, masks = dataset.states, dataset.masks
    if not include_trajectory or env is None:
        return X, masks
    _, _, _, states = greedy_episode(actor, env)
    extra_x, extra_m = [], []
    for s in states:
        x = env.encode(s)
        safe = env.safe_action_set(s)
        a = int(np.argmax(forward(actor, actor.spec, x)))
        allowed = np.zeros(env.n_actions, dtype=bool)
        if safe[a]:
            allowed[a] = True
        else:
            allowed = safe
        extra_x.append(x)
        extra_m.append(allowed)
    if not extra_x:
        return X, masks
    return np.vstack([X, extra_x]), np.vstack([masks, extra_m])


def _allowed_loss(actor, X, allowed):
    logits, cache = forward_cache(actor, actor.spec, X)
    lp = log_softmax(logits)
    p = np.exp(lp)
    masked = np.where(allowed, lp, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    log_pa = m[:, 0] + np.log(np.exp(masked - m).sum(axis=1))
    loss = -float(log_pa.mean())
    # d log P_A / dz = p * 1_A / P_A - p
    g = -(np.where(allowed, p, 0.0) / np.exp(log_pa)[:, None] - p) / len(X)
    return loss, backward(actor, actor.spec, cache, g)


def _multilabel_loss(actor, X, targets):
    logits, cache = forward_cache(actor, actor.spec, X)
    y = targets.astype(np.float64)
    loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
    g = (1.0 / (1.0 + np.exp(-logits)) - y) / logits.size
    return loss, backward(actor, actor.spec, cache, g)


def safety_finetune(actor: ParamVector, dataset: SafetyDataset, config: FinetuneConfig,
                    rng: np.random.Generator, env: GridEnv | None = None):
    """Push the actor to choose safe actions at every dataset state.

    Stops once the critical-state rate is 1, a certifying inverse temperature
    exists and the loss is at most ``loss_tol``. Returns ``(actor, log_rows,
    reached)``; ``reached`` is False if the epoch cap hit first.
    """
    if len(dataset) == 0:
        raise ValueError("safety dataset is empty")
    actor = actor.copy()
    delta = delta_star(dataset)
    if config.mode == "allowed":
        X, targets = _finetune_targets(actor, dataset, env, config.include_trajectory)
        loss_fn = _allowed_loss
    else:
        X, targets = dataset.states, dataset.masks
        loss_fn = _multilabel_loss
    opt = Adam(lr=config.learning_rate)
    rows = []

    def satisfied(loss):
        if loss > config.loss_tol or critical_state_rate(actor, dataset) < 1.0:
            return False
        try:
            search_inverse_temperature(actor, dataset, delta, config.beta_range,
                                       config.beta_grid)
        except CertificationRefused:
            return False
        return True

    for epoch in range(config.max_epochs + 1):
        loss, g = loss_fn(actor, X, targets)
        rows.append({"epoch": epoch, "loss": loss,
                     "phi_sc": critical_state_rate(actor, dataset)})
        if satisfied(loss):
            return actor, rows, True
        if epoch == config.max_epochs:
            break
        if config.batch_size and config.batch_size < len(X):
            order = rng.permutation(len(X))
            for start in range(0, len(X), config.batch_size):
                idx = order[start:start + config.batch_size]
                _, g = loss_fn(actor, X[idx], targets[idx])
                opt.step(actor.values, g)
        else:
            opt.step(actor.values, g)
    return actor, rows, False
