"""Masked residual actor-critic networks.

Architecture (both roles): running observation normalization, a masked linear
embedding into the hidden width, ``blocks`` pre-norm residual MLP blocks
(LayerNorm -> Linear(h -> 4h) -> ReLU -> Linear(4h -> h) -> skip), a final
LayerNorm, and masked output heads. The critic defaults to four times the
actor's width and twice its depth; integer width/depth scales multiply the
base hidden dimension and block count.

Every linear weight matrix (embedding, block layers, heads) is maskable.
Masked entries are zero at initialization and their gradients are exactly
zero, so they stay bit-exactly zero through any optimizer sequence.

Weights are drawn orthogonally from per-layer numpy streams derived from
(seed, layer name), so construction is reproducible independent of torch's
global RNG state. Biases start at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .sparsity import STREAM_INIT, LayerShape, SparsityPlan, layer_stream, sample_mask

ACTOR_BASE_HIDDEN = 128
ACTOR_BASE_BLOCKS = 1
CRITIC_BASE_HIDDEN = 512
CRITIC_BASE_BLOCKS = 2

HIDDEN_GAIN = float(np.sqrt(2.0))  # ReLU layers
HEAD_GAIN = 1.0

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0

VAR_FLOOR = 1e-8


class PlanMismatchError(ValueError):
    """Plan layer names or shapes do not match the constructed architecture."""


@dataclass(frozen=True)
class NetworkSpec:
    """Defines one network of the actor-critic pair.

    ``action_dim`` is the policy output dimension for actors and the action
    input dimension for critics (0 gives a state-value critic). ``head``
    selects the output parameterization: "gaussian" (mean and log-std per
    action dim), "deterministic" (tanh action), or "value" (scalar).
    """

    role: str
    obs_dim: int
    action_dim: int
    base_hidden: int
    base_blocks: int
    width_scale: int = 1
    depth_scale: int = 1
    head: str = "value"

    def __post_init__(self) -> None:
        if self.role not in ("actor", "critic"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.head not in ("gaussian", "deterministic", "value"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.role == "actor" and self.head == "value":
            raise ValueError("actor networks need a gaussian or deterministic head")
        if self.role == "critic" and self.head != "value":
            raise ValueError("critic networks use the value head")
        for name in ("obs_dim", "base_hidden", "base_blocks", "width_scale", "depth_scale"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.action_dim < 0 or (self.role == "actor" and self.action_dim < 1):
            raise ValueError("action_dim must be positive for actors, nonnegative for critics")

    @property
    def hidden(self) -> int:
        return self.base_hidden * self.width_scale

    @property
    def blocks(self) -> int:
        return self.base_blocks * self.depth_scale

    @property
    def input_dim(self) -> int:
        return self.obs_dim + (self.action_dim if self.role == "critic" else 0)

    def head_layers(self) -> list[tuple[str, int]]:
        if self.head == "gaussian":
            return [("head.mean", self.action_dim), ("head.log_std", self.action_dim)]
        if self.head == "deterministic":
            return [("head.out", self.action_dim)]
        return [("head.out", 1)]

    def layer_shapes(self) -> list[LayerShape]:
        shapes = [LayerShape(f"{self.role}.embed", self.input_dim, self.hidden)]
        for i in range(self.blocks):
            shapes.append(LayerShape(f"{self.role}.block{i}.fc1", self.hidden, 4 * self.hidden))
            shapes.append(LayerShape(f"{self.role}.block{i}.fc2", 4 * self.hidden, self.hidden))
        for name, out in self.head_layers():
            shapes.append(LayerShape(f"{self.role}.{name}", self.hidden, out))
        return shapes


def actor_spec(obs_dim, action_dim, width_scale=1, depth_scale=1, head="gaussian") -> NetworkSpec:
    return NetworkSpec(
        role="actor",
        obs_dim=obs_dim,
        action_dim=action_dim,
        base_hidden=ACTOR_BASE_HIDDEN,
        base_blocks=ACTOR_BASE_BLOCKS,
        width_scale=width_scale,
        depth_scale=depth_scale,
        head=head,
    )


def critic_spec(obs_dim, action_dim, width_scale=1, depth_scale=1) -> NetworkSpec:
    return NetworkSpec(
        role="critic",
        obs_dim=obs_dim,
        action_dim=action_dim,
        base_hidden=CRITIC_BASE_HIDDEN,
        base_blocks=CRITIC_BASE_BLOCKS,
        width_scale=width_scale,
        depth_scale=depth_scale,
        head="value",
    )


class ObsNormalizer(nn.Module):
    """Running observation whitening (Welford statistics in float64).

    ``update`` must be fed each environment observation exactly once, when it
    is first observed; replayed batches never touch the statistics.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.register_buffer("count", torch.zeros((), dtype=torch.float64))
        self.register_buffer("running_mean", torch.zeros(dim, dtype=torch.float64))
        self.register_buffer("running_m2", torch.zeros(dim, dtype=torch.float64))

    @torch.no_grad()
    def update(self, obs) -> None:
        x = torch.as_tensor(np.asarray(obs), dtype=torch.float64)
        if x.dim() == 1:
            x = x.unsqueeze(0)
        n = x.shape[0]
        batch_mean = x.mean(dim=0)
        batch_m2 = ((x - batch_mean) ** 2).sum(dim=0)
        total = self.count + n
        delta = batch_mean - self.running_mean
        self.running_mean += delta * (n / total)
        self.running_m2 += batch_m2 + delta**2 * (self.count * n / total)
        self.count.fill_(total)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.count.item() == 0:
            return x
        var = self.running_m2 / self.count
        out = (x.to(torch.float64) - self.running_mean) / torch.sqrt(var + VAR_FLOOR)
        return out.to(x.dtype)


class MaskedLinear(nn.Module):
    """Linear layer evaluated through an optional fixed binary mask.

    The effective weight is ``mask * weight`` wherever the layer is used, so
    gradients at masked positions are exactly zero and masked entries never
    move off zero.
    """

    def __init__(self, in_features: int, out_features: int, dtype=torch.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.zeros(out_features, in_features, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=dtype))
        self.register_buffer("mask", None)

    def set_mask(self, bits: np.ndarray) -> None:
        if bits.shape != tuple(self.weight.shape):
            raise PlanMismatchError(
                f"mask shape {bits.shape} does not match weight {tuple(self.weight.shape)}"
            )
        self.mask = torch.as_tensor(np.array(bits), dtype=self.weight.dtype)

    @property
    def effective_weight(self) -> torch.Tensor:
        if self.mask is None:
            return self.weight
        return self.weight * self.mask

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.effective_weight, self.bias)


class ResidualBlock(nn.Module):
    def __init__(self, hidden: int, dtype=torch.float32):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, eps=VAR_FLOOR, dtype=dtype)
        self.fc1 = MaskedLinear(hidden, 4 * hidden, dtype=dtype)
        self.fc2 = MaskedLinear(4 * hidden, hidden, dtype=dtype)

    def forward(self, x: torch.Tensor, cache: list | None = None) -> torch.Tensor:
        h = F.relu(self.fc1(self.norm(x)))
        if cache is not None:
            cache.append(h)
        return x + self.fc2(h)


@dataclass
class ActivationCache:
    """Post-ReLU block activations and the penultimate feature matrix."""

    block_activations: list[torch.Tensor] = field(default_factory=list)
    features: torch.Tensor | None = None


class Network(nn.Module):
    def __init__(self, spec: NetworkSpec, dtype=torch.float32):
        super().__init__()
        self.spec = spec
        self.normalizer = ObsNormalizer(spec.obs_dim)
        self.embed = MaskedLinear(spec.input_dim, spec.hidden, dtype=dtype)
        self.blocks = nn.ModuleList(ResidualBlock(spec.hidden, dtype=dtype) for _ in range(spec.blocks))
        self.final_norm = nn.LayerNorm(spec.hidden, eps=VAR_FLOOR, dtype=dtype)
        self.heads = nn.ModuleDict(
            {name.split(".", 1)[1]: MaskedLinear(spec.hidden, out, dtype=dtype) for name, out in spec.head_layers()}
        )

    def masked_linears(self) -> Iterator[tuple[str, MaskedLinear]]:
        """(plan layer name, module) pairs, in layer_shapes order."""
        yield f"{self.spec.role}.embed", self.embed
        for i, block in enumerate(self.blocks):
            yield f"{self.spec.role}.block{i}.fc1", block.fc1
            yield f"{self.spec.role}.block{i}.fc2", block.fc2
        for name, _ in self.spec.head_layers():
            yield f"{self.spec.role}.{name}", self.heads[name.split(".", 1)[1]]

    def weight_matrices(self) -> Iterator[tuple[str, torch.Tensor]]:
        for name, lin in self.masked_linears():
            yield name, lin.weight

    def decay_parameters(self) -> list[nn.Parameter]:
        """Weight matrices: the only parameters that receive weight decay."""
        return [lin.weight for _, lin in self.masked_linears()]

    def no_decay_parameters(self) -> list[nn.Parameter]:
        decayed = {id(p) for p in self.decay_parameters()}
        return [p for p in self.parameters() if id(p) not in decayed]

    def _check_input(self, obs: torch.Tensor, action: torch.Tensor | None) -> None:
        if obs.dim() != 2 or obs.shape[1] != self.spec.obs_dim:
            raise ValueError(
                f"expected observations of shape (batch, {self.spec.obs_dim}), got {tuple(obs.shape)}"
            )
        expects_action = self.spec.role == "critic" and self.spec.action_dim > 0
        if expects_action and (action is None or action.shape != (obs.shape[0], self.spec.action_dim)):
            raise ValueError(f"critic expects actions of shape (batch, {self.spec.action_dim})")
        if not expects_action and action is not None:
            raise ValueError("this network does not take an action input")

    def trunk(self, obs, action=None, cache: ActivationCache | None = None) -> torch.Tensor:
        self._check_input(obs, action)
        x = self.normalizer(obs)
        if action is not None:
            x = torch.cat([x, action.to(x.dtype)], dim=1)
        x = self.embed(x)
        block_cache = cache.block_activations if cache is not None else None
        for block in self.blocks:
            x = block(x, cache=block_cache)
        x = self.final_norm(x)
        if cache is not None:
            cache.features = x
        return x

    def forward(self, obs, action=None, cache: ActivationCache | None = None):
        """Head outputs: (mean, log_std) for gaussian, bounded action for
        deterministic, scalar batch vector for value."""
        x = self.trunk(obs, action=action, cache=cache)
        if self.spec.head == "gaussian":
            mean = self.heads["mean"](x)
            log_std = torch.clamp(self.heads["log_std"](x), LOG_STD_MIN, LOG_STD_MAX)
            return mean, log_std
        if self.spec.head == "deterministic":
            return torch.tanh(self.heads["out"](x))
        return self.heads["out"](x).squeeze(-1)


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diagonal(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def _init_weight(name: str, lin: MaskedLinear, seed: int) -> None:
    gain = HEAD_GAIN if ".head." in name else HIDDEN_GAIN
    rng = layer_stream(seed, name, STREAM_INIT)
    w = _orthogonal(rng, lin.out_features, lin.in_features, gain)
    with torch.no_grad():
        lin.weight.copy_(torch.as_tensor(w, dtype=lin.weight.dtype))
        if lin.mask is not None:
            lin.weight.mul_(lin.mask)
        lin.bias.zero_()


def build_network(
    spec: NetworkSpec,
    plan: SparsityPlan | None = None,
    seed: int = 0,
    dtype=torch.float32,
) -> Network:
    """Construct the network, attach masks from ``plan`` (if any), and draw
    the initial weights. Masked positions are exactly zero from the start."""
    net = Network(spec, dtype=dtype)
    shapes = {s.name: s for s in spec.layer_shapes()}
    for name, lin in net.masked_linears():
        if plan is not None:
            if name not in plan:
                raise PlanMismatchError(f"plan has no entry for layer {name!r}")
            entry = plan.entry(name)
            shape = shapes[name]
            if (entry.fan_in, entry.fan_out) != (shape.fan_in, shape.fan_out):
                raise PlanMismatchError(
                    f"plan entry {name!r} is {entry.fan_in}x{entry.fan_out}, "
                    f"architecture needs {shape.fan_in}x{shape.fan_out}"
                )
            lin.set_mask(sample_mask(plan, shape, seed).bits)
        _init_weight(name, lin, seed)
    return net


@torch.no_grad()
def reset_network(network: Network, seed: int) -> None:
    """Re-draw all active weights from the initialization distribution.

    Masks are untouched (re-applied to the fresh draw), biases and LayerNorm
    parameters return to their initial values, and the observation-normalizer
    statistics are preserved. Optimizer state is owned by the agent and must
    be cleared there.
    """
    for name, lin in network.masked_linears():
        _init_weight(name, lin, seed)
    for module in network.modules():
        if isinstance(module, nn.LayerNorm):
            module.weight.fill_(1.0)
            module.bias.zero_()


def network_spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "role": spec.role,
        "obs_dim": spec.obs_dim,
        "action_dim": spec.action_dim,
        "base_hidden": spec.base_hidden,
        "base_blocks": spec.base_blocks,
        "width_scale": spec.width_scale,
        "depth_scale": spec.depth_scale,
        "head": spec.head,
    }


def network_spec_from_dict(doc: dict) -> NetworkSpec:
    return NetworkSpec(**doc)


def scaled(spec: NetworkSpec, width_scale: int, depth_scale: int) -> NetworkSpec:
    return replace(spec, width_scale=width_scale, depth_scale=depth_scale)
