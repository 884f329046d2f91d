"""Off-policy SAC/DDPG and a streaming actor-critic with eligibility traces.

All agents train masked residual networks. Target networks are deep copies
whose parameters follow the online networks through Polyak averaging; they
share the online critic/actor's observation normalizer object so value
targets always see the current whitening statistics.

Weight decay is decoupled (AdamW) and applies only to weight matrices, never
to biases, LayerNorm parameters, or the temperature. Because gradients at
masked positions are exactly zero and decay multiplies zero by a constant,
masked entries remain bit-exactly zero through any number of updates.

The streaming agent stores no experience: each transition is consumed once,
through accumulating traces ``z <- gamma * lambda * z + grad`` and updates
``theta += step * delta * z``, with traces cleared at episode boundaries.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, fields, replace
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .networks import Network, actor_spec, build_network, critic_spec
from .sparsity import SparsityPlan

ACTION_STREAM = 0x414354
LOG_PROB_EPS = 1e-6


@dataclass(frozen=True)
class HyperParams:
    lr_actor: float = 1e-4
    lr_critic: float = 1e-4
    lr_temperature: float = 1e-4
    tau: float = 5e-3
    batch_size: int = 256
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-2
    gamma: float = 0.99
    replay_ratio: int = 2
    init_temperature: float = 1e-2
    target_entropy: float | None = None  # defaults to action_dim / 2
    exploration_noise: float = 0.1
    replay_capacity: int = 1_000_000
    warmup_steps: int = 5000

    def __post_init__(self) -> None:
        # gamma = 0 is degenerate but valid: the TD target collapses to the reward
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [0, 1)")
        for name in ("lr_actor", "lr_critic", "lr_temperature", "tau", "batch_size",
                     "replay_ratio", "init_temperature", "replay_capacity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def with_overrides(self, overrides: dict) -> "HyperParams":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter overrides: {sorted(unknown)}")
        return replace(self, **overrides)


@dataclass(frozen=True)
class StreamConfig:
    trace_decay: float = 0.8
    step_size: float = 1.0
    step_normalization: bool = True  # bound steps by the trace L1 norm
    kappa: float = 2.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.trace_decay <= 1.0):
            raise ValueError("trace_decay must lie in [0, 1]")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool


class Batch(NamedTuple):
    state: torch.Tensor
    action: torch.Tensor
    reward: torch.Tensor
    next_state: torch.Tensor
    terminal: torch.Tensor


class ReplayBuffer:
    """Uniform-sampling ring buffer with FIFO eviction."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        self.capacity = capacity
        self.state = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.action = np.zeros((capacity, action_dim), dtype=np.float32)
        self.reward = np.zeros(capacity, dtype=np.float32)
        self.next_state = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.terminal = np.zeros(capacity, dtype=np.float32)
        self.insert_count = 0

    def __len__(self) -> int:
        return min(self.insert_count, self.capacity)

    def add(self, tr: Transition) -> None:
        if not math.isfinite(tr.reward):
            raise ValueError("reward must be finite")
        i = self.insert_count % self.capacity
        self.state[i] = tr.state
        self.action[i] = tr.action
        self.reward[i] = tr.reward
        self.next_state[i] = tr.next_state
        self.terminal[i] = float(tr.terminal)
        self.insert_count += 1

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        if len(self) < batch_size:
            raise ValueError(f"buffer holds {len(self)} transitions, need {batch_size}")
        idx = rng.integers(0, len(self), size=batch_size)
        return Batch(
            state=torch.from_numpy(self.state[idx]),
            action=torch.from_numpy(self.action[idx]),
            reward=torch.from_numpy(self.reward[idx]),
            next_state=torch.from_numpy(self.next_state[idx]),
            terminal=torch.from_numpy(self.terminal[idx]),
        )


def make_optimizer(net: Network, lr: float, hp: HyperParams) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        [
            {"params": net.decay_parameters(), "weight_decay": hp.weight_decay},
            {"params": net.no_decay_parameters(), "weight_decay": 0.0},
        ],
        lr=lr,
        betas=hp.adam_betas,
        foreach=True,
    )


@torch.no_grad()
def soft_update(target: torch.nn.Module, online: torch.nn.Module, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online over parameters.

    Masked entries are zero on both sides, so they stay exactly zero; tau=0
    and tau=1 are bit-exact no-op and copy respectively.
    """
    tgt = list(target.parameters())
    src = list(online.parameters())
    if len(tgt) != len(src) or any(t.shape != s.shape for t, s in zip(tgt, src)):
        raise ValueError("target and online networks have different architectures")
    torch._foreach_mul_(tgt, 1.0 - tau)
    torch._foreach_add_(tgt, src, alpha=tau)


def _freeze(net: torch.nn.Module, flag: bool) -> None:
    for p in net.parameters():
        p.requires_grad_(flag)


def _make_target(net: Network) -> Network:
    target = copy.deepcopy(net)
    target.normalizer = net.normalizer  # share whitening stats with the online net
    _freeze(target, False)
    return target


def gaussian_log_prob(mean: torch.Tensor, log_std: torch.Tensor, raw: torch.Tensor) -> torch.Tensor:
    std = log_std.exp()
    return (-0.5 * ((raw - mean) / std) ** 2 - log_std - 0.5 * math.log(2 * math.pi)).sum(-1)


class AgentBase:
    algo = ""

    def __init__(self, actor: Network, critic: Network, hp: HyperParams, seed: int):
        self.actor = actor
        self.critic = critic
        self.hp = hp
        self.seed = seed
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, ACTION_STREAM]))
        self.grad_steps = 0

    @property
    def action_dim(self) -> int:
        return self.actor.spec.action_dim

    def observe(self, obs) -> None:
        """Feed one newly observed environment state to the normalizers."""
        self.actor.normalizer.update(obs)
        if self.critic.normalizer is not self.actor.normalizer:
            self.critic.normalizer.update(obs)

    def _obs_tensor(self, obs) -> torch.Tensor:
        return torch.as_tensor(np.asarray(obs), dtype=torch.float32).unsqueeze(0)

    def networks(self) -> dict[str, Network]:
        raise NotImplementedError

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        raise NotImplementedError

    def reset_optimizers(self) -> None:
        for opt in self.optimizers().values():
            opt.state.clear()


class SACAgent(AgentBase):
    algo = "sac"

    def __init__(self, actor: Network, critic: Network, hp: HyperParams, seed: int):
        if actor.spec.head != "gaussian":
            raise ValueError("SAC needs a gaussian actor head")
        super().__init__(actor, critic, hp, seed)
        self.critic_target = _make_target(critic)
        self.log_alpha = torch.tensor(math.log(hp.init_temperature), requires_grad=True)
        # policy entropy is driven toward -|A|/2 (nats); a positive target of
        # +|A|/2 is unattainable for tanh-squashed policies and diverges alpha
        self.target_entropy = (
            hp.target_entropy if hp.target_entropy is not None else -self.action_dim / 2.0
        )
        self.actor_opt = make_optimizer(actor, hp.lr_actor, hp)
        self.critic_opt = make_optimizer(critic, hp.lr_critic, hp)
        self.alpha_opt = torch.optim.AdamW(
            [self.log_alpha], lr=hp.lr_temperature, betas=hp.adam_betas, weight_decay=0.0
        )

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.detach().exp())

    def networks(self) -> dict[str, Network]:
        return {"actor": self.actor, "critic": self.critic, "critic_target": self.critic_target}

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {"actor": self.actor_opt, "critic": self.critic_opt, "alpha": self.alpha_opt}

    def sample_policy(self, obs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Reparameterized tanh-squashed action and its log-probability."""
        mean, log_std = self.actor(obs)
        eps = torch.as_tensor(
            self.rng.standard_normal(mean.shape, dtype=np.float64), dtype=mean.dtype
        )
        raw = mean + log_std.exp() * eps
        action = torch.tanh(raw)
        log_prob = gaussian_log_prob(mean, log_std, raw)
        log_prob = log_prob - torch.log(1.0 - action**2 + LOG_PROB_EPS).sum(-1)
        return action, log_prob

    def act(self, obs, mode: str = "explore") -> np.ndarray:
        with torch.no_grad():
            if mode == "eval":
                mean, _ = self.actor(self._obs_tensor(obs))
                action = torch.tanh(mean)
            else:
                action, _ = self.sample_policy(self._obs_tensor(obs))
        return np.clip(action.numpy()[0].astype(np.float64), -1.0, 1.0)

    @torch.no_grad()
    def compute_targets(self, batch: Batch) -> torch.Tensor:
        next_action, next_log_prob = self.sample_policy(batch.next_state)
        q_next = self.critic_target(batch.next_state, next_action)
        alpha = self.log_alpha.exp()
        return batch.reward + self.hp.gamma * (1.0 - batch.terminal) * (
            q_next - alpha * next_log_prob
        )

    def update(self, batch: Batch) -> dict[str, float]:
        y = self.compute_targets(batch)

        q = self.critic(batch.state, batch.action)
        critic_loss = F.mse_loss(q, y)
        self.critic_opt.zero_grad(set_to_none=True)
        critic_loss.backward()
        self.critic_opt.step()

        _freeze(self.critic, False)
        action, log_prob = self.sample_policy(batch.state)
        q_pi = self.critic(batch.state, action)
        alpha = float(self.log_alpha.detach().exp())
        actor_loss = (alpha * log_prob - q_pi).mean()
        self.actor_opt.zero_grad(set_to_none=True)
        actor_loss.backward()
        self.actor_opt.step()
        _freeze(self.critic, True)

        # alpha minimizes alpha * (-log pi - H*), H* = -action_dim / 2
        alpha_loss = (self.log_alpha.exp() * (-log_prob.detach() - self.target_entropy)).mean()
        self.alpha_opt.zero_grad(set_to_none=True)
        alpha_loss.backward()
        self.alpha_opt.step()

        soft_update(self.critic_target, self.critic, self.hp.tau)
        self.grad_steps += 1
        return {
            "critic_loss": float(critic_loss.detach()),
            "actor_loss": float(actor_loss.detach()),
            "alpha": self.alpha,
        }

    def reset(self, seed: int) -> None:
        """Reset diagnostic: redraw active weights, re-sync targets, clear moments."""
        from .networks import reset_network

        reset_network(self.actor, seed)
        reset_network(self.critic, seed)
        self.critic_target.load_state_dict(self.critic.state_dict())
        self.reset_optimizers()


class DDPGAgent(AgentBase):
    algo = "ddpg"

    def __init__(self, actor: Network, critic: Network, hp: HyperParams, seed: int):
        if actor.spec.head != "deterministic":
            raise ValueError("DDPG needs a deterministic actor head")
        super().__init__(actor, critic, hp, seed)
        self.actor_target = _make_target(actor)
        self.critic_target = _make_target(critic)
        self.actor_opt = make_optimizer(actor, hp.lr_actor, hp)
        self.critic_opt = make_optimizer(critic, hp.lr_critic, hp)

    def networks(self) -> dict[str, Network]:
        return {
            "actor": self.actor,
            "critic": self.critic,
            "actor_target": self.actor_target,
            "critic_target": self.critic_target,
        }

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {"actor": self.actor_opt, "critic": self.critic_opt}

    def act(self, obs, mode: str = "explore") -> np.ndarray:
        with torch.no_grad():
            action = self.actor(self._obs_tensor(obs)).numpy()[0].astype(np.float64)
        if mode == "explore" and self.hp.exploration_noise > 0:
            action = action + self.rng.normal(0.0, self.hp.exploration_noise, size=action.shape)
        return np.clip(action, -1.0, 1.0)

    @torch.no_grad()
    def compute_targets(self, batch: Batch) -> torch.Tensor:
        next_action = self.actor_target(batch.next_state)
        q_next = self.critic_target(batch.next_state, next_action)
        return batch.reward + self.hp.gamma * (1.0 - batch.terminal) * q_next

    def update(self, batch: Batch) -> dict[str, float]:
        y = self.compute_targets(batch)

        q = self.critic(batch.state, batch.action)
        critic_loss = F.mse_loss(q, y)
        self.critic_opt.zero_grad(set_to_none=True)
        critic_loss.backward()
        self.critic_opt.step()

        _freeze(self.critic, False)
        actor_loss = -self.critic(batch.state, self.actor(batch.state)).mean()
        self.actor_opt.zero_grad(set_to_none=True)
        actor_loss.backward()
        self.actor_opt.step()
        _freeze(self.critic, True)

        soft_update(self.actor_target, self.actor, self.hp.tau)
        soft_update(self.critic_target, self.critic, self.hp.tau)
        self.grad_steps += 1
        return {"critic_loss": float(critic_loss.detach()), "actor_loss": float(actor_loss.detach())}

    def reset(self, seed: int) -> None:
        from .networks import reset_network

        reset_network(self.actor, seed)
        reset_network(self.critic, seed)
        self.actor_target.load_state_dict(self.actor.state_dict())
        self.critic_target.load_state_dict(self.critic.state_dict())
        self.reset_optimizers()


class StreamACAgent(AgentBase):
    """Actor-critic(lambda) that consumes each transition exactly once.

    The critic is a state-value network (no action input). No experience is
    stored; memory is O(1) in environment steps. Step sizes are optionally
    bounded by the trace L1 norm to keep single-sample updates stable.
    """

    algo = "stream_ac"

    def __init__(
        self,
        actor: Network,
        critic: Network,
        hp: HyperParams,
        seed: int,
        stream: StreamConfig | None = None,
    ):
        if actor.spec.head != "gaussian":
            raise ValueError("the streaming agent needs a gaussian actor head")
        if critic.spec.action_dim != 0:
            raise ValueError("the streaming critic is a state-value network")
        super().__init__(actor, critic, hp, seed)
        self.stream = stream or StreamConfig()
        self._actor_params = list(actor.parameters())
        self._critic_params = list(critic.parameters())
        self.actor_traces = [torch.zeros_like(p) for p in self._actor_params]
        self.critic_traces = [torch.zeros_like(p) for p in self._critic_params]

    def networks(self) -> dict[str, Network]:
        return {"actor": self.actor, "critic": self.critic}

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {}

    def act(self, obs, mode: str = "explore") -> np.ndarray:
        with torch.no_grad():
            mean, log_std = self.actor(self._obs_tensor(obs))
        action = mean.numpy()[0].astype(np.float64)
        if mode == "explore":
            action = action + np.exp(log_std.numpy()[0]) * self.rng.standard_normal(action.shape)
        return np.clip(action, -1.0, 1.0)

    def end_episode(self) -> None:
        """Clear traces at an episode boundary (terminal or truncation)."""
        for z in self.actor_traces + self.critic_traces:
            z.zero_()

    def _step_scale(self, delta: float, traces: list[torch.Tensor]) -> float:
        if not self.stream.step_normalization:
            return self.stream.step_size
        z_norm = float(torch.stack(torch._foreach_norm(traces, 1.0)).sum())
        bound = self.stream.step_size * self.stream.kappa * max(abs(delta), 1.0) * z_norm
        return self.stream.step_size / max(1.0, bound)

    @torch.no_grad()
    def _trace_update(self, traces, params, delta: float) -> None:
        torch._foreach_mul_(traces, self.hp.gamma * self.stream.trace_decay)
        torch._foreach_add_(traces, [p.grad for p in params])
        scale = self._step_scale(delta, traces)
        torch._foreach_add_(params, traces, alpha=scale * delta)

    def stream_step(self, tr: Transition) -> dict[str, float]:
        gamma = self.hp.gamma
        obs = self._obs_tensor(tr.state)
        next_obs = self._obs_tensor(tr.next_state)

        with torch.no_grad():
            v_next = self.critic(next_obs)[0]
        v = self.critic(obs)[0]
        delta = float(tr.reward + gamma * (1.0 - float(tr.terminal)) * v_next - v.detach())

        self.critic.zero_grad(set_to_none=False)
        v.backward()
        self._trace_update(self.critic_traces, self._critic_params, delta)

        mean, log_std = self.actor(obs)
        action = torch.as_tensor(tr.action, dtype=mean.dtype).unsqueeze(0)
        log_prob = gaussian_log_prob(mean, log_std, action).squeeze(0)
        self.actor.zero_grad(set_to_none=False)
        log_prob.backward()
        self._trace_update(self.actor_traces, self._actor_params, delta)

        if tr.terminal:
            self.end_episode()
        self.grad_steps += 1
        return {
            "critic_loss": delta**2,
            "actor_loss": -delta * float(log_prob.detach()),
            "td_error": delta,
        }

    def reset(self, seed: int) -> None:
        from .networks import reset_network

        reset_network(self.actor, seed)
        reset_network(self.critic, seed)
        self.end_episode()


def agent_specs(algo: str, obs_dim: int, action_dim: int, width_scale: int = 1, depth_scale: int = 1):
    """The (actor, critic) NetworkSpecs ``make_agent`` builds for ``algo``."""
    if algo == "sac":
        return (
            actor_spec(obs_dim, action_dim, width_scale, depth_scale, head="gaussian"),
            critic_spec(obs_dim, action_dim, width_scale, depth_scale),
        )
    if algo == "ddpg":
        return (
            actor_spec(obs_dim, action_dim, width_scale, depth_scale, head="deterministic"),
            critic_spec(obs_dim, action_dim, width_scale, depth_scale),
        )
    if algo == "stream_ac":
        return (
            actor_spec(obs_dim, action_dim, width_scale, depth_scale, head="gaussian"),
            critic_spec(obs_dim, 0, width_scale, depth_scale),
        )
    raise ValueError(f"unknown algorithm {algo!r}")


def make_agent(
    algo: str,
    obs_dim: int,
    action_dim: int,
    width_scale: int = 1,
    depth_scale: int = 1,
    plan: SparsityPlan | None = None,
    seed: int = 0,
    hp: HyperParams | None = None,
    stream: StreamConfig | None = None,
    networks: tuple[Network, Network] | None = None,
) -> AgentBase:
    """Build the actor-critic pair for ``algo`` and wrap it in an agent.

    Prebuilt ``networks`` (actor, critic) take precedence over construction,
    for callers that post-process weights between build and wrap."""
    hp = hp or HyperParams()
    a_spec, c_spec = agent_specs(algo, obs_dim, action_dim, width_scale, depth_scale)
    if networks is not None:
        actor, critic = networks
    else:
        actor = build_network(a_spec, plan, seed)
        critic = build_network(c_spec, plan, seed)
    if algo == "sac":
        return SACAgent(actor, critic, hp, seed)
    if algo == "ddpg":
        return DDPGAgent(actor, critic, hp, seed)
    return StreamACAgent(actor, critic, hp, seed, stream=stream)
