import numpy as np
import torch

from sparse_rl.agents import DDPGAgent, HyperParams, SACAgent, StreamACAgent, StreamConfig
from sparse_rl.networks import NetworkSpec, build_network
from sparse_rl.sparsity import plan_er

torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    lines = []
    for outcome in ("passed", "failed", "skipped"):
        for report in terminalreporter.stats.get(outcome, []):
            if "acceptance" not in getattr(report, "keywords", {}):
                continue
            if outcome != "skipped" and report.when != "call":
                continue
            name = report.nodeid.split("::")[-1]
            lines.append((name, outcome.upper()))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, outcome in sorted(lines):
            terminalreporter.write_line(f"{outcome:7s} {name}")


def tiny_specs(algo, obs_dim=3, action_dim=1, hidden_actor=8, hidden_critic=16, blocks=1):
    actor_head = "deterministic" if algo == "ddpg" else "gaussian"
    critic_action = 0 if algo == "stream_ac" else action_dim
    actor = NetworkSpec(
        role="actor",
        obs_dim=obs_dim,
        action_dim=action_dim,
        base_hidden=hidden_actor,
        base_blocks=blocks,
        head=actor_head,
    )
    critic = NetworkSpec(
        role="critic",
        obs_dim=obs_dim,
        action_dim=critic_action,
        base_hidden=hidden_critic,
        base_blocks=blocks,
        head="value",
    )
    return actor, critic


def tiny_agent(algo, sparsity=None, seed=0, hp=None, stream=None, **spec_kw):
    a_spec, c_spec = tiny_specs(algo, **spec_kw)
    plan = None
    if sparsity is not None:
        plan = plan_er(sparsity, a_spec.layer_shapes() + c_spec.layer_shapes())
    hp = hp or HyperParams()
    actor = build_network(a_spec, plan, seed)
    critic = build_network(c_spec, plan, seed)
    if algo == "sac":
        return SACAgent(actor, critic, hp, seed)
    if algo == "ddpg":
        return DDPGAgent(actor, critic, hp, seed)
    return StreamACAgent(actor, critic, hp, seed, stream=stream)


def random_batch(rng, obs_dim=3, action_dim=1, size=8, terminal=0.0):
    from sparse_rl.agents import Batch

    return Batch(
        state=torch.as_tensor(rng.normal(size=(size, obs_dim)), dtype=torch.float32),
        action=torch.as_tensor(rng.uniform(-1, 1, size=(size, action_dim)), dtype=torch.float32),
        reward=torch.as_tensor(rng.normal(size=size), dtype=torch.float32),
        next_state=torch.as_tensor(rng.normal(size=(size, obs_dim)), dtype=torch.float32),
        terminal=torch.full((size,), terminal, dtype=torch.float32),
    )


def zero_network(net, head_biases=None):
    """Zero every parameter; optionally pin head biases to constants."""
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
        for name, value in (head_biases or {}).items():
            net.heads[name].bias.fill_(value)
    return net
