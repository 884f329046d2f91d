"""Checkpoint container: one ``.npz`` archive holding everything a run needs.

Layout (numpy zip archive; arrays use explicit little-endian dtypes):

* ``meta``                          - JSON string: format version, algo,
                                      config, network specs, plan JSON, seed,
                                      step, and per-layer mask bit counts.
* ``param/<net>/<name>``            - parameters as ``<f4``.
* ``mask/<net>/<layer>``            - masks bit-packed with ``np.packbits``;
                                      unpacked against the weight shape.
* ``norm/<net>/{count,mean,m2}``    - observation-normalizer state (``<f8``).
* ``opt/<opt>/<index>/{exp_avg,exp_avg_sq,step}`` - AdamW moments (``<f4``).
* ``extra/log_alpha``               - SAC temperature parameter.
* ``trace/{actor,critic}/<index>``  - streaming eligibility traces.

``save_checkpoint`` captures a live agent; ``load_agent`` reconstructs one
that resumes bit-for-bit (same masks, weights, moments, normalizer state).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .agents import DDPGAgent, HyperParams, SACAgent, StreamACAgent, StreamConfig
from .networks import Network, build_network, network_spec_from_dict, network_spec_to_dict

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _collect_network(prefix: str, net: Network, arrays: dict) -> None:
    for name, p in net.named_parameters():
        arrays[f"param/{prefix}/{name}"] = p.detach().numpy().astype("<f4")
    for layer_name, lin in net.masked_linears():
        if lin.mask is not None:
            bits = lin.mask.numpy().astype(np.uint8)
            arrays[f"mask/{prefix}/{layer_name}"] = np.packbits(bits.reshape(-1))
    arrays[f"norm/{prefix}/count"] = net.normalizer.count.numpy().astype("<f8")
    arrays[f"norm/{prefix}/mean"] = net.normalizer.running_mean.numpy().astype("<f8")
    arrays[f"norm/{prefix}/m2"] = net.normalizer.running_m2.numpy().astype("<f8")


def _collect_optimizer(prefix: str, opt: torch.optim.Optimizer, arrays: dict) -> None:
    index = 0
    for group in opt.param_groups:
        for p in group["params"]:
            state = opt.state.get(p, {})
            if "exp_avg" in state:
                arrays[f"opt/{prefix}/{index}/exp_avg"] = state["exp_avg"].numpy().astype("<f4")
                arrays[f"opt/{prefix}/{index}/exp_avg_sq"] = (
                    state["exp_avg_sq"].numpy().astype("<f4")
                )
                arrays[f"opt/{prefix}/{index}/step"] = np.array(
                    [float(state["step"])], dtype="<f8"
                )
            index += 1


def _restore_optimizer(prefix: str, opt: torch.optim.Optimizer, data: dict) -> None:
    index = 0
    for group in opt.param_groups:
        for p in group["params"]:
            key = f"opt/{prefix}/{index}/exp_avg"
            if key in data:
                opt.state[p] = {
                    "step": torch.tensor(float(data[f"opt/{prefix}/{index}/step"][0])),
                    "exp_avg": torch.from_numpy(np.array(data[key], dtype=np.float32)),
                    "exp_avg_sq": torch.from_numpy(
                        np.array(data[f"opt/{prefix}/{index}/exp_avg_sq"], dtype=np.float32)
                    ),
                }
            index += 1


def _restore_network(prefix: str, net: Network, data: dict) -> None:
    with torch.no_grad():
        for name, p in net.named_parameters():
            p.copy_(torch.from_numpy(np.array(data[f"param/{prefix}/{name}"], dtype=np.float32)))
    for layer_name, lin in net.masked_linears():
        key = f"mask/{prefix}/{layer_name}"
        if key in data:
            count = lin.weight.numel()
            bits = np.unpackbits(data[key])[:count].reshape(tuple(lin.weight.shape))
            lin.set_mask(bits)
        else:
            lin.mask = None
    net.normalizer.count.copy_(torch.from_numpy(np.array(data[f"norm/{prefix}/count"])))
    net.normalizer.running_mean.copy_(torch.from_numpy(np.array(data[f"norm/{prefix}/mean"])))
    net.normalizer.running_m2.copy_(torch.from_numpy(np.array(data[f"norm/{prefix}/m2"])))


def save_checkpoint(path, agent, config_doc: dict | None = None, step: int = 0,
                    plan=None) -> None:
    """Write the agent (networks, masks, optimizer moments, normalizers, seed)."""
    arrays: dict[str, np.ndarray] = {}
    for prefix, net in agent.networks().items():
        _collect_network(prefix, net, arrays)
    for prefix, opt in agent.optimizers().items():
        _collect_optimizer(prefix, opt, arrays)
    if isinstance(agent, SACAgent):
        arrays["extra/log_alpha"] = agent.log_alpha.detach().numpy().reshape(1).astype("<f8")
    if isinstance(agent, StreamACAgent):
        for i, z in enumerate(agent.actor_traces):
            arrays[f"trace/actor/{i}"] = z.numpy().astype("<f4")
        for i, z in enumerate(agent.critic_traces):
            arrays[f"trace/critic/{i}"] = z.numpy().astype("<f4")

    meta = {
        "format_version": FORMAT_VERSION,
        "algo": agent.algo,
        "seed": agent.seed,
        "rng_state": agent.rng.bit_generator.state,
        "step": step,
        "hyperparams": {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in agent.hp.__dict__.items()
        },
        "actor_spec": network_spec_to_dict(agent.actor.spec),
        "critic_spec": network_spec_to_dict(agent.critic.spec),
        "stream": agent.stream.__dict__ if isinstance(agent, StreamACAgent) else None,
        "plan": plan.to_json() if plan is not None else None,
        "config": config_doc,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, meta=np.array(json.dumps(meta)), **arrays)


def load_agent(path):
    """Rebuild the agent stored at ``path``; returns (agent, meta)."""
    try:
        data = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta" not in data:
        raise CheckpointError(f"{path} is not a checkpoint (missing meta)")
    try:
        meta = json.loads(str(data["meta"]))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {meta.get('format_version')}")

    hp_doc = dict(meta["hyperparams"])
    hp_doc["adam_betas"] = tuple(hp_doc["adam_betas"])
    hp = HyperParams(**hp_doc)
    actor = build_network(network_spec_from_dict(meta["actor_spec"]), seed=meta["seed"])
    critic = build_network(network_spec_from_dict(meta["critic_spec"]), seed=meta["seed"])

    algo = meta["algo"]
    if algo == "sac":
        agent = SACAgent(actor, critic, hp, meta["seed"])
    elif algo == "ddpg":
        agent = DDPGAgent(actor, critic, hp, meta["seed"])
    elif algo == "stream_ac":
        agent = StreamACAgent(
            actor, critic, hp, meta["seed"], stream=StreamConfig(**meta["stream"])
        )
    else:
        raise CheckpointError(f"{path}: unknown algo {algo!r}")

    for prefix, net in agent.networks().items():
        _restore_network(prefix, net, data)
    for prefix, opt in agent.optimizers().items():
        _restore_optimizer(prefix, opt, data)
    if isinstance(agent, SACAgent):
        with torch.no_grad():
            agent.log_alpha.copy_(torch.tensor(float(data["extra/log_alpha"][0])))
    if isinstance(agent, StreamACAgent):
        for i, z in enumerate(agent.actor_traces):
            z.copy_(torch.from_numpy(np.array(data[f"trace/actor/{i}"], dtype=np.float32)))
        for i, z in enumerate(agent.critic_traces):
            z.copy_(torch.from_numpy(np.array(data[f"trace/critic/{i}"], dtype=np.float32)))
    if meta.get("rng_state") is not None:
        agent.rng.bit_generator.state = meta["rng_state"]
    return agent, meta
