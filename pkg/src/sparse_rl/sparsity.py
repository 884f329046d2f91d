"""One-shot random pruning: layer-wise sparsity allocation and fixed binary masks.

A network is pruned once, before training, by sampling a binary mask per weight
matrix. Two allocation schemes turn a single global sparsity level ``S`` into
per-layer sparsities:

* ``uniform`` - every maskable layer gets sparsity ``S``.
* ``er`` (Erdos-Renyi) - layer density is proportional to
  ``(fan_in + fan_out) / (fan_in * fan_out)`` for fully connected layers (with
  the kernel-augmented form for convolutions), scaled by a single factor so the
  total active-weight budget equals ``round((1 - S) * total_weights)``. Layers
  whose scaled density would exceed 1 are capped at fully dense and the factor
  is re-solved over the rest (water-filling).

Randomness discipline: every mask is drawn from a dedicated ``PCG64`` stream
seeded by ``SeedSequence([seed, crc32(layer_name), STREAM_MASK])``, so masks
are a pure function of (seed, layer name, plan) and bit-identical across runs
and platforms.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

STREAM_MASK = 0x4D41534B  # "MASK"
STREAM_INIT = 0x494E4954  # "INIT"
STREAM_ZERO = 0x5A45524F  # "ZERO"


class SparsityError(ValueError):
    """Raised for infeasible sparsity targets or unknown layers."""


def layer_stream(seed: int, name: str, purpose: int) -> np.random.Generator:
    """Per-layer random stream: derived from the run seed and the layer name."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(name.encode()), purpose]))
    )


def _round_half_away(x: float) -> int:
    return int(np.floor(x + 0.5)) if x >= 0 else -int(np.floor(-x + 0.5))


@dataclass(frozen=True)
class LayerShape:
    """Shape of one parameter tensor that may receive a mask.

    ``kernel`` holds (w, h) for convolutional weights; bias vectors and
    normalization parameters are never pruned and carry ``maskable=False``.
    """

    name: str
    fan_in: int
    fan_out: int
    kernel: tuple[int, int] | None = None
    maskable: bool = True

    def __post_init__(self) -> None:
        if self.fan_in <= 0 or self.fan_out <= 0:
            raise SparsityError(f"layer {self.name!r}: fan_in/fan_out must be positive")
        if self.kernel is not None and (self.kernel[0] <= 0 or self.kernel[1] <= 0):
            raise SparsityError(f"layer {self.name!r}: kernel dims must be positive")

    @property
    def weight_count(self) -> int:
        k = self.kernel[0] * self.kernel[1] if self.kernel is not None else 1
        return self.fan_in * self.fan_out * k

    @property
    def dims(self) -> tuple[int, ...]:
        if self.kernel is not None:
            return (self.fan_out, self.fan_in, self.kernel[0], self.kernel[1])
        return (self.fan_out, self.fan_in)

    def er_coefficient(self) -> float:
        """Density scale: (fan_in + fan_out [+ w + h]) / (fan_in * fan_out [* w * h])."""
        if self.kernel is not None:
            w, h = self.kernel
            return (self.fan_in + self.fan_out + w + h) / (self.fan_in * self.fan_out * w * h)
        return (self.fan_in + self.fan_out) / (self.fan_in * self.fan_out)


@dataclass(frozen=True)
class PlanEntry:
    name: str
    fan_in: int
    fan_out: int
    sparsity: float
    active_count: int


@dataclass(frozen=True)
class SparsityPlan:
    """Global sparsity target plus per-layer sparsities and exact active counts."""

    global_sparsity: float
    method: str  # "uniform" | "er"
    entries: tuple[PlanEntry, ...] = field(default_factory=tuple)

    def entry(self, name: str) -> PlanEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise SparsityError(f"layer {name!r} not in plan")

    def __contains__(self, name: str) -> bool:
        return any(e.name == name for e in self.entries)

    @property
    def total_active(self) -> int:
        return sum(e.active_count for e in self.entries)

    def to_json(self) -> str:
        doc = {
            "method": self.method,
            "global_sparsity": self.global_sparsity,
            "layers": [
                {
                    "name": e.name,
                    "fan_in": e.fan_in,
                    "fan_out": e.fan_out,
                    "sparsity": e.sparsity,
                    "active_count": e.active_count,
                }
                for e in self.entries
            ],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "SparsityPlan":
        doc = json.loads(text)
        entries = tuple(
            PlanEntry(
                name=l["name"],
                fan_in=l["fan_in"],
                fan_out=l["fan_out"],
                sparsity=l["sparsity"],
                active_count=l["active_count"],
            )
            for l in doc["layers"]
        )
        return cls(global_sparsity=doc["global_sparsity"], method=doc["method"], entries=entries)


@dataclass(frozen=True)
class Mask:
    """Fixed binary mask for one layer; bits are immutable after creation."""

    shape: LayerShape
    bits: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        self.bits.setflags(write=False)

    @property
    def active_count(self) -> int:
        return int(self.bits.sum())


def _check_global_sparsity(sparsity: float) -> None:
    if not (0.0 <= sparsity < 1.0):
        raise SparsityError(f"global sparsity must lie in [0, 1), got {sparsity}")


def _maskable(shapes: list[LayerShape]) -> list[LayerShape]:
    out = [s for s in shapes if s.maskable]
    if not out:
        raise SparsityError("no maskable layers")
    return out


def plan_uniform(sparsity: float, shapes: list[LayerShape]) -> SparsityPlan:
    """Every maskable layer receives the global sparsity level exactly."""
    _check_global_sparsity(sparsity)
    entries = []
    for s in _maskable(shapes):
        wc = s.weight_count
        active = wc - _round_half_away(sparsity * wc)
        entries.append(PlanEntry(s.name, s.fan_in, s.fan_out, sparsity, active))
    return SparsityPlan(global_sparsity=sparsity, method="uniform", entries=tuple(entries))


def plan_er(sparsity: float, shapes: list[LayerShape]) -> SparsityPlan:
    """Erdos-Renyi allocation with iterative capping of fully dense layers.

    The per-layer density is ``eps * er_coefficient``; ``eps`` is solved so the
    total active count hits ``round((1 - S) * total)``. Any layer whose density
    would exceed 1 is fixed dense and ``eps`` is re-solved over the remainder.
    Counts are rounded per layer (so identical shapes always receive identical
    sparsity; the global count error is bounded by half a weight per layer),
    and every layer keeps at least one active weight.
    """
    _check_global_sparsity(sparsity)
    layers = _maskable(shapes)
    total = sum(s.weight_count for s in layers)
    target = _round_half_away((1.0 - sparsity) * total)
    if target < len(layers):
        raise SparsityError(
            f"sparsity {sparsity} leaves {target} active weights for {len(layers)} layers; "
            "at least one active weight per layer is required"
        )

    dense: set[str] = set()
    while True:
        budget = target - sum(s.weight_count for s in layers if s.name in dense)
        remaining = [s for s in layers if s.name not in dense]
        if not remaining:
            break
        denom = sum(s.er_coefficient() * s.weight_count for s in remaining)
        eps = budget / denom
        overflow = [s for s in remaining if eps * s.er_coefficient() > 1.0]
        if not overflow:
            break
        worst = max(s.er_coefficient() for s in overflow)
        dense.update(s.name for s in overflow if s.er_coefficient() == worst)

    counts: dict[str, int] = {}
    for s in layers:
        if s.name in dense:
            counts[s.name] = s.weight_count
        else:
            d = min(1.0, eps * s.er_coefficient())
            counts[s.name] = min(s.weight_count, max(1, _round_half_away(d * s.weight_count)))

    entries = []
    for s in layers:
        active = counts[s.name]
        entries.append(
            PlanEntry(s.name, s.fan_in, s.fan_out, 1.0 - active / s.weight_count, active)
        )
    return SparsityPlan(global_sparsity=sparsity, method="er", entries=tuple(entries))


def sample_mask(plan: SparsityPlan, layer: LayerShape, seed: int) -> Mask:
    """Draw the layer's fixed mask: exactly ``active_count`` positions, uniform
    without replacement, from a stream determined by (seed, layer name)."""
    entry = plan.entry(layer.name)
    if entry.fan_in != layer.fan_in or entry.fan_out != layer.fan_out:
        raise SparsityError(f"layer {layer.name!r} does not match its plan entry")
    rng = layer_stream(seed, layer.name, STREAM_MASK)
    bits = np.zeros(layer.weight_count, dtype=np.uint8)
    if entry.active_count > 0:
        idx = rng.choice(layer.weight_count, size=entry.active_count, replace=False)
        bits[idx] = 1
    return Mask(shape=layer, bits=bits.reshape(layer.dims), seed=seed)


def sparse_init_zeros(weights: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Zero a uniformly random fraction of entries, leaving them trainable.

    No mask is attached: subsequent gradient updates are free to move the
    zeroed entries away from zero, so the measured sparsity decays during
    training. The zeroed count is exact for tensors with no pre-existing zeros.
    """
    if not (0.0 <= fraction <= 1.0):
        raise SparsityError(f"fraction must lie in [0, 1], got {fraction}")
    out = np.array(weights, copy=True)
    k = _round_half_away(fraction * out.size)
    if k > 0:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, STREAM_ZERO])))
        idx = rng.choice(out.size, size=k, replace=False)
        out.reshape(-1)[idx] = 0.0
    return out


def measured_sparsity(network) -> float:
    """Fraction of maskable weight entries that are exactly zero.

    Masked entries always count; for SparseInit networks this is the quantity
    that decays as training proceeds. ``network`` must expose
    ``weight_matrices() -> Iterable[(name, tensor)]``.
    """
    zeros = 0
    total = 0
    for _, w in network.weight_matrices():
        arr = w.detach().cpu().numpy() if hasattr(w, "detach") else np.asarray(w)
        zeros += int((arr == 0.0).sum())
        total += arr.size
    return zeros / total if total else 0.0
