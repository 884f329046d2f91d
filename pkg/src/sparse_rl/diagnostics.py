"""Optimization-pathology metrics computed on network snapshots.

All functions are read-only with respect to training state: they may scribble
on ``.grad`` scratch space (every update clears it first) but never touch
parameters, optimizer moments, masks, or normalizer statistics, and they
restore the agent's action RNG so repeated measurement is a no-op.

Metrics:

* ``srank``          - count of feature-matrix singular values above a
                       threshold (default: relative, 0.01 of the largest).
* ``dormant_ratio``  - fraction of neurons whose mean absolute activation,
                       normalized by the layer mean, falls at or below tau.
* ``fau``            - fraction of rectifier units that fire on at least one
                       probe sample.
* ``grad_norm_active`` / ``param_norm_active`` - L2 norms over unpruned
                       entries.
* ``grad_covariance`` -  k x k cosine-similarity matrix of per-sample loss
                       gradients (gradient interference).
* ``reset_steps``    - the periodic reset-diagnostic trigger schedule.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .networks import ActivationCache, Network

DEFAULT_SRANK_RELATIVE = 0.01
DEFAULT_DORMANCY_TAU = 0.025
DEFAULT_COVARIANCE_SAMPLES = 32


@dataclass(frozen=True)
class FeatureMatrix:
    """d x m matrix of m-dimensional features for d probe samples."""

    values: np.ndarray
    source: str = ""

    def __post_init__(self) -> None:
        v = self.values
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError("feature matrix must be 2-D and non-empty")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature matrix contains non-finite entries")


@dataclass(frozen=True)
class ActivationBatch:
    """Per-layer post-rectifier activation matrices over one probe batch."""

    layers: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("activation batch needs at least one layer")
        for h in self.layers:
            if h.ndim != 2 or h.shape[1] < 1:
                raise ValueError("activations must be (batch, width) matrices")
            if not np.all(np.isfinite(h)):
                raise ValueError("activations contain non-finite entries")

    @classmethod
    def from_cache(cls, cache: ActivationCache) -> "ActivationBatch":
        return cls(tuple(h.detach().cpu().numpy() for h in cache.block_activations))


@dataclass(frozen=True)
class GradCovariance:
    """Cosine similarities of per-sample gradients; symmetric, entries in [-1, 1]."""

    k: int
    matrix: np.ndarray

    @property
    def offdiag_mean_abs(self) -> float:
        off = ~np.eye(self.k, dtype=bool)
        return float(np.abs(self.matrix[off]).mean()) if self.k > 1 else 0.0


@dataclass(frozen=True)
class DiagnosticsRecord:
    """One snapshot of every pathology metric (critic-centric srank/fau)."""

    step: int
    srank: int
    dormant_ratio_actor: float
    dormant_ratio_critic: float
    fau: float
    grad_norm_actor: float
    grad_norm_critic: float
    param_norm_actor: float
    param_norm_critic: float
    cov_offdiag_mean: float

    def as_rows(self) -> list[tuple[int, str, float]]:
        return [
            (self.step, "srank", float(self.srank)),
            (self.step, "dormant_ratio_actor", self.dormant_ratio_actor),
            (self.step, "dormant_ratio_critic", self.dormant_ratio_critic),
            (self.step, "fau", self.fau),
            (self.step, "grad_norm_actor", self.grad_norm_actor),
            (self.step, "grad_norm_critic", self.grad_norm_critic),
            (self.step, "param_norm_actor", self.param_norm_actor),
            (self.step, "param_norm_critic", self.param_norm_critic),
            (self.step, "cov_offdiag_mean", self.cov_offdiag_mean),
        ]


def srank(
    features: FeatureMatrix | np.ndarray,
    threshold: float | None = None,
    relative: float = DEFAULT_SRANK_RELATIVE,
) -> int:
    """Number of singular values above the threshold.

    With ``threshold`` given it is used as an absolute cutoff (must be > 0);
    otherwise the cutoff is ``relative`` times the largest singular value.
    """
    values = features.values if isinstance(features, FeatureMatrix) else np.asarray(features)
    FeatureMatrix(values=np.asarray(values, dtype=np.float64))  # validates
    sigma = np.linalg.svd(np.asarray(values, dtype=np.float64), compute_uv=False)
    if threshold is None:
        tau = relative * (sigma[0] if sigma.size else 0.0)
    else:
        tau = threshold
    if tau <= 0.0:
        raise ValueError("srank threshold must be positive")
    return int((sigma > tau).sum())


def dormant_ratio(acts: ActivationBatch, tau: float = DEFAULT_DORMANCY_TAU) -> float:
    """Fraction of tau-dormant neurons across the counted layers.

    A neuron's score is its mean absolute activation divided by the layer
    mean of those values; it is dormant when the score is <= tau. A layer
    with all-zero activations counts as entirely dormant (score 0).
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    dormant = 0
    total = 0
    for h in acts.layers:
        mean_abs = np.abs(h).mean(axis=0)
        layer_mean = mean_abs.mean()
        scores = np.zeros_like(mean_abs) if layer_mean == 0.0 else mean_abs / layer_mean
        dormant += int((scores <= tau).sum())
        total += mean_abs.size
    return dormant / total


def fau(acts: ActivationBatch) -> float:
    """Fraction of units active (output > 0 on any probe sample)."""
    active = 0
    total = 0
    for h in acts.layers:
        active += int((h > 0).any(axis=0).sum())
        total += h.shape[1]
    return active / total


def _masked_weight_grads(network: Network) -> Iterator[torch.Tensor]:
    for _, lin in network.masked_linears():
        if lin.weight.grad is None:
            continue
        g = lin.weight.grad
        yield g * lin.mask if lin.mask is not None else g


def grad_norm_active(network: Network) -> float:
    """L2 norm of the recorded gradients over active weight entries plus all
    bias and normalization parameters."""
    weight_ids = {id(lin.weight) for _, lin in network.masked_linears()}
    total = 0.0
    for g in _masked_weight_grads(network):
        total += float((g.double() ** 2).sum())
    for p in network.parameters():
        if id(p) not in weight_ids and p.grad is not None:
            total += float((p.grad.double() ** 2).sum())
    return float(np.sqrt(total))


def param_norm_active(network: Network) -> float:
    """L2 norm of active weight entries and bias vectors.

    Masked entries are zero, so the norm over active entries equals the norm
    of the full masked tensor; LayerNorm scale parameters are excluded.
    """
    total = 0.0
    counted: set[int] = set()
    with torch.no_grad():
        for _, lin in network.masked_linears():
            total += float((lin.effective_weight.double() ** 2).sum())
            total += float((lin.bias.double() ** 2).sum())
            counted.update((id(lin.weight), id(lin.bias)))
        for name, p in network.named_parameters():
            if name.endswith(".bias") and id(p) not in counted:
                total += float((p.double() ** 2).sum())
    return float(np.sqrt(total))


def grad_covariance(
    per_sample_loss: Callable[[int], torch.Tensor],
    k: int,
    params: Sequence[torch.nn.Parameter],
) -> GradCovariance:
    """Cosine-similarity matrix of the k per-sample loss gradients.

    ``per_sample_loss(i)`` must return the scalar loss of sample i with a
    fresh graph. Samples with an exactly zero gradient get zero rows and
    columns (their diagonal entry is 0, not 1).
    """
    if k < 2:
        raise ValueError("gradient covariance needs at least 2 samples")
    params = [p for p in params if p.requires_grad]
    total = sum(p.numel() for p in params)
    store_dtype = params[0].dtype if params else torch.float32
    grads = torch.zeros((k, total), dtype=store_dtype)
    for i in range(k):
        loss = per_sample_loss(i)
        gs = torch.autograd.grad(loss, params, allow_unused=True)
        offset = 0
        for p, g in zip(params, gs):
            n = p.numel()
            if g is not None:
                grads[i, offset : offset + n] = g.reshape(-1)
            offset += n
    # Gram matrix accumulated in float64, chunked to bound peak memory.
    gram = torch.zeros((k, k), dtype=torch.float64)
    chunk = max(1, min(total, 1_000_000))
    for start in range(0, total, chunk):
        block = grads[:, start : start + chunk].to(torch.float64)
        gram += block @ block.T
    gram = gram.numpy()
    norms = np.sqrt(np.clip(np.diag(gram), 0.0, None))
    safe = np.where(norms == 0.0, 1.0, norms)
    matrix = np.clip(gram / safe[:, None] / safe[None, :], -1.0, 1.0)
    matrix[norms == 0.0, :] = 0.0
    matrix[:, norms == 0.0] = 0.0
    matrix = (matrix + matrix.T) / 2.0
    return GradCovariance(k=k, matrix=matrix)


def reset_steps(interval_steps: int, total_steps: int) -> list[int]:
    """In-training reset triggers: every ``interval_steps`` env steps, strictly
    before ``total_steps`` (a reset at the final step would never train)."""
    if interval_steps <= 0:
        raise ValueError("reset interval must be positive")
    return list(range(interval_steps, total_steps, interval_steps))


def reset_schedule(interval_steps: int) -> Iterator[int]:
    """Unbounded stream of reset-trigger steps."""
    if interval_steps <= 0:
        raise ValueError("reset interval must be positive")
    step = interval_steps
    while True:
        yield step
        step += interval_steps


def covariance_to_csv(cov: GradCovariance, path) -> None:
    """k header row then the k x k matrix, for heatmap rendering."""
    with open(path, "w") as fh:
        fh.write(f"{cov.k}\n")
        for row in cov.matrix:
            fh.write(",".join(f"{v:.8f}" for v in row) + "\n")


def collect_diagnostics(agent, probe, step: int = 0, *,
                        srank_threshold: float | None = None,
                        srank_relative: float = DEFAULT_SRANK_RELATIVE,
                        dormancy_tau: float = DEFAULT_DORMANCY_TAU,
                        covariance_samples: int = DEFAULT_COVARIANCE_SAMPLES,
                        covariance_csv: str | None = None) -> DiagnosticsRecord:
    """Measure every metric on one probe batch.

    Srank and FAU are computed on the critic (penultimate features and block
    rectifier outputs); dormant ratios and norms on both networks. Per-sample
    TD losses drive the gradient covariance. The agent's action RNG is
    restored afterwards so measurement never perturbs training.
    """
    rng_state = agent.rng.bit_generator.state
    try:
        critic_takes_action = agent.critic.spec.action_dim > 0

        critic_cache = ActivationCache()
        actor_cache = ActivationCache()
        with torch.no_grad():
            if critic_takes_action:
                agent.critic(probe.state, probe.action, cache=critic_cache)
            else:
                agent.critic(probe.state, cache=critic_cache)
            agent.actor(probe.state, cache=actor_cache)

        features = FeatureMatrix(critic_cache.features.numpy().astype(np.float64), source="critic")
        critic_acts = ActivationBatch.from_cache(critic_cache)
        actor_acts = ActivationBatch.from_cache(actor_cache)

        if hasattr(agent, "compute_targets"):
            targets = agent.compute_targets(probe)

            def critic_loss():
                q = agent.critic(probe.state, probe.action)
                return 0.5 * ((q - targets) ** 2).mean()

            def per_sample_loss(i):
                q = agent.critic(probe.state[i : i + 1], probe.action[i : i + 1])
                return 0.5 * (q[0] - targets[i]) ** 2

        else:  # streaming: state-value TD errors
            with torch.no_grad():
                v_next = agent.critic(probe.next_state)
                targets = probe.reward + agent.hp.gamma * (1.0 - probe.terminal) * v_next

            def critic_loss():
                v = agent.critic(probe.state)
                return 0.5 * ((v - targets) ** 2).mean()

            def per_sample_loss(i):
                v = agent.critic(probe.state[i : i + 1])
                return 0.5 * (v[0] - targets[i]) ** 2

        agent.critic.zero_grad(set_to_none=True)
        critic_loss().backward()
        g_critic = grad_norm_active(agent.critic)

        agent.actor.zero_grad(set_to_none=True)
        if agent.algo == "sac":
            action, log_prob = agent.sample_policy(probe.state)
            q_pi = agent.critic(probe.state, action)
            (float(agent.log_alpha.exp()) * log_prob - q_pi).mean().backward()
        elif agent.algo == "ddpg":
            (-agent.critic(probe.state, agent.actor(probe.state)).mean()).backward()
        else:
            mean, log_std = agent.actor(probe.state)
            from .agents import gaussian_log_prob

            delta = (targets - agent.critic(probe.state)).detach()
            (-(delta * gaussian_log_prob(mean, log_std, probe.action)).mean()).backward()
        g_actor = grad_norm_active(agent.actor)
        agent.actor.zero_grad(set_to_none=True)
        agent.critic.zero_grad(set_to_none=True)

        k = min(covariance_samples, probe.state.shape[0])
        cov = grad_covariance(per_sample_loss, k, list(agent.critic.parameters()))
        if covariance_csv is not None:
            covariance_to_csv(cov, covariance_csv)

        return DiagnosticsRecord(
            step=step,
            srank=srank(features, threshold=srank_threshold, relative=srank_relative),
            dormant_ratio_actor=dormant_ratio(actor_acts, dormancy_tau),
            dormant_ratio_critic=dormant_ratio(critic_acts, dormancy_tau),
            fau=fau(critic_acts),
            grad_norm_actor=g_actor,
            grad_norm_critic=g_critic,
            param_norm_actor=param_norm_active(agent.actor),
            param_norm_critic=param_norm_active(agent.critic),
            cov_offdiag_mean=cov.offdiag_mean_abs,
        )
    finally:
        agent.rng.bit_generator.state = rng_state
