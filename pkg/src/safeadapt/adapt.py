"""Downstream adaptation: projected PPO, plain PPO and EWC-regularized PPO."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .envs import GridEnv, SafetyDataset
from .policy_net import ParamVector, backward, forward_cache, log_softmax
from .ppo import PpoConfig, PpoLearner, critical_state_rate, greedy_reward
from .rashomon import Certificate

MODES = ("safe", "unsafe", "ewc")


class ContainmentError(RuntimeError):
    """The actor left the certified box during projected adaptation."""


@dataclass
class AdaptConfig:
    mode: str = "safe"
    max_timesteps: int = 50_000
    ent_coef: float = 0.1
    learning_rate: float = 3e-4
    rollout_steps: int = 2048
    n_epochs: int = 10
    minibatch_size: int = 64
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    early_stop: bool = True
    early_stop_threshold: float = 1.0
    eval_every: int = 20_480
    eval_episodes: int = 1
    ewc_lambda: float = 5000.0
    ewc_eval_episodes: int = 10
    fisher_cap: int = 1000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ewc_lambda < 0:
            raise ValueError("EWC lambda must be nonnegative")

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(
            rollout_steps=self.rollout_steps, n_epochs=self.n_epochs,
            minibatch_size=self.minibatch_size, gamma=self.gamma,
            gae_lambda=self.gae_lambda, clip_range=self.clip_range, vf_coef=self.vf_coef,
            ent_coef=self.ent_coef, learning_rate=self.learning_rate,
            max_grad_norm=self.max_grad_norm, max_timesteps=self.max_timesteps,
            early_stop=self.early_stop, early_stop_threshold=self.early_stop_threshold,
            eval_episodes=self.ewc_eval_episodes if self.mode == "ewc" else self.eval_episodes,
            eval_every=self.eval_every,
        )

    def to_json(self) -> dict:
        return asdict(self)


def _check_layout(params: ParamVector, cert: Certificate) -> None:
    if params.spec != cert.center.spec:
        raise ValueError("actor layout does not match the certificate")


def project(params: ParamVector, cert: Certificate) -> ParamVector:
    """Clip every actor component into ``[center - alpha, center + alpha]``."""
    _check_layout(params, cert)
    box = cert.orthotope
    return ParamVector(params.spec, np.clip(params.values, box.lower, box.upper))


def is_contained(values: np.ndarray, cert: Certificate) -> bool:
    box = cert.orthotope
    return bool(np.all(values >= box.lower) and np.all(values <= box.upper))


@dataclass
class FisherDiag:
    values: np.ndarray
    n_states: int
    cap: int

    def __post_init__(self):
        if np.any(self.values < 0):
            raise ValueError("Fisher diagonal must be nonnegative")

    def to_json(self) -> dict:
        return {"values": self.values.tolist(), "n_states": self.n_states, "cap": self.cap}

    @classmethod
    def from_json(cls, d: dict) -> "FisherDiag":
        return cls(np.asarray(d["values"], float), int(d["n_states"]), int(d["cap"]))


def fisher_diag(actor: ParamVector, states: np.ndarray, cap: int,
                rng: np.random.Generator) -> FisherDiag:
    """Empirical diagonal Fisher of the actor from sampled ``(s, a ~ pi(s))`` pairs."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if len(states) == 0:
        raise ValueError("Fisher estimation needs at least one state")
    n = min(cap, len(states))
    idx = np.sort(rng.choice(len(states), size=n, replace=False))
    acc = np.zeros(actor.spec.n_params)
    for i in idx:
        logits, cache = forward_cache(actor, actor.spec, states[i])
        lp = log_softmax(logits)[0]
        p = np.exp(lp)
        cdf = np.cumsum(p)
        a = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(p) - 1)
        g_logits = -p
        g_logits[a] += 1.0
        g = backward(actor, actor.spec, cache, g_logits[None, :])
        acc += g * g
    return FisherDiag(acc / n, len(states), cap)


def _adapt_loop(actor, critic, env, config: AdaptConfig, rng, dataset, penalty=None,
                hook=None, cert=None):
    actor = actor.copy()
    critic = critic.copy()
    ppo = config.ppo_config()
    learner = PpoLearner(actor, critic, env, ppo, rng, actor_penalty=penalty,
                         after_actor_step=hook)
    rows = []
    next_eval = ppo.eval_every
    while learner.timesteps < ppo.max_timesteps:
        n = min(ppo.rollout_steps, ppo.max_timesteps - learner.timesteps)
        buf = learner.collect(n)
        stats = learner.update(buf)
        row = {"step": learner.timesteps, "mode": config.mode,
               "contained": is_contained(actor.values, cert) if cert is not None else "",
               "phi_sc_task1": critical_state_rate(actor, dataset) if dataset else float("nan"),
               "greedy_eval_reward": float("nan"), **stats}
        rows.append(row)
        if ppo.early_stop and learner.timesteps >= next_eval:
            next_eval += ppo.eval_every
            row["greedy_eval_reward"] = greedy_reward(actor, env, ppo.eval_episodes)
            if row["greedy_eval_reward"] >= ppo.early_stop_threshold:
                break
    return actor, critic, rows


def adapt_safe(actor_source: ParamVector, critic: ParamVector, cert: Certificate,
               env_task2: GridEnv, config: AdaptConfig, rng: np.random.Generator,
               dataset: SafetyDataset | None = None):
    """PPO on the downstream task with projection after every actor step."""
    _check_layout(actor_source, cert)
    if not np.array_equal(actor_source.values, cert.center.values):
        raise ValueError("projected adaptation must start from the certificate centre")
    lower, upper = cert.orthotope.lower, cert.orthotope.upper

    def hook(values):
        np.clip(values, lower, upper, out=values)
        if not (np.all(values >= lower) and np.all(values <= upper)):
            raise ContainmentError("actor parameters left the certified box")

    return _adapt_loop(actor_source, critic, env_task2, config, rng, dataset,
                       hook=hook, cert=cert)


def adapt_unsafe(actor_source: ParamVector, critic: ParamVector, env_task2: GridEnv,
                 config: AdaptConfig, rng: np.random.Generator,
                 dataset: SafetyDataset | None = None):
    """Unconstrained PPO on the downstream task."""
    return _adapt_loop(actor_source, critic, env_task2, config, rng, dataset)


def ewc_penalty(fisher: FisherDiag, anchor: np.ndarray, lam: float):
    """``(lam/2) * sum F (theta - anchor)^2`` and its gradient."""
    weights = lam * fisher.values
    anchor = anchor.copy()

    def penalty(values):
        diff = values - anchor
        wd = weights * diff
        return 0.5 * float(wd @ diff), wd

    return penalty


def adapt_ewc(actor_source: ParamVector, critic: ParamVector, fisher: FisherDiag,
              env_task2: GridEnv, config: AdaptConfig, rng: np.random.Generator,
              dataset: SafetyDataset | None = None):
    """PPO with an EWC penalty toward the source actor; critic is not penalized."""
    if fisher.values.shape != actor_source.values.shape:
        raise ValueError("Fisher diagonal does not match the actor")
    penalty = ewc_penalty(fisher, actor_source.values, config.ewc_lambda)
    return _adapt_loop(actor_source, critic, env_task2, config, rng, dataset, penalty=penalty)
