import math

import numpy as np
import pytest
import torch
from torch import nn

from conftest import random_batch, tiny_agent, zero_network
from sparse_rl.agents import (
    ACTION_STREAM,
    Batch,
    HyperParams,
    ReplayBuffer,
    StreamConfig,
    Transition,
    soft_update,
)
from sparse_rl.networks import build_network, critic_spec
from sparse_rl.sparsity import measured_sparsity


# ---------------------------------------------------------------------------
# replay buffer


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(capacity=4, obs_dim=1, action_dim=1)
    for i in range(6):
        buf.add(Transition(np.array([i]), np.array([0.0]), float(i), np.array([i + 1]), False))
    assert len(buf) == 4
    assert sorted(buf.reward.tolist()) == [2.0, 3.0, 4.0, 5.0]


def test_buffer_uniform_sampling_covers_storage():
    buf = ReplayBuffer(capacity=8, obs_dim=1, action_dim=1)
    for i in range(8):
        buf.add(Transition(np.array([i]), np.array([0.0]), float(i), np.array([0]), False))
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(50):
        seen.update(buf.sample(rng, 4).reward.tolist())
    assert seen == {float(i) for i in range(8)}


def test_buffer_rejects_undersized_sample():
    buf = ReplayBuffer(capacity=8, obs_dim=1, action_dim=1)
    buf.add(Transition(np.zeros(1), np.zeros(1), 0.0, np.zeros(1), False))
    with pytest.raises(ValueError):
        buf.sample(np.random.default_rng(0), 2)


def test_buffer_rejects_nonfinite_reward():
    buf = ReplayBuffer(capacity=8, obs_dim=1, action_dim=1)
    with pytest.raises(ValueError):
        buf.add(Transition(np.zeros(1), np.zeros(1), float("nan"), np.zeros(1), False))


# ---------------------------------------------------------------------------
# soft target updates


def build_tiny_critic(seed, hidden=8):
    spec = critic_spec(3, 1)
    spec = spec.__class__(**{**spec.__dict__, "base_hidden": hidden, "base_blocks": 1})
    return build_network(spec, seed=seed)


def test_soft_update_tau_one_copies():
    t, o = build_tiny_critic(1), build_tiny_critic(2)
    soft_update(t, o, 1.0)
    for tp, op in zip(t.parameters(), o.parameters()):
        assert torch.equal(tp, op)


def test_soft_update_tau_zero_is_noop():
    t, o = build_tiny_critic(1), build_tiny_critic(2)
    before = [p.clone() for p in t.parameters()]
    soft_update(t, o, 0.0)
    for tp, b in zip(t.parameters(), before):
        assert torch.equal(tp, b)


def test_soft_update_geometric_decay():
    t, o = build_tiny_critic(1), build_tiny_critic(2)
    gap0 = [tp.detach().clone() - op.detach() for tp, op in zip(t.parameters(), o.parameters())]
    for _ in range(200):
        soft_update(t, o, 5e-3)
    shrink = (1.0 - 5e-3) ** 200
    for tp, op, g in zip(t.parameters(), o.parameters(), gap0):
        torch.testing.assert_close(tp, op + shrink * g, rtol=1e-4, atol=1e-6)


def test_soft_update_rejects_mismatched_architectures():
    with pytest.raises(ValueError):
        soft_update(build_tiny_critic(1, hidden=8), build_tiny_critic(2, hidden=16), 0.5)


# ---------------------------------------------------------------------------
# SAC


def test_sac_targets_gamma_zero_equal_reward():
    agent = tiny_agent("sac", hp=HyperParams(gamma=0.0))
    batch = random_batch(np.random.default_rng(0))
    assert torch.equal(agent.compute_targets(batch), batch.reward)


def test_sac_targets_terminal_masks_bootstrap():
    agent = tiny_agent("sac", hp=HyperParams(gamma=0.9))
    batch = random_batch(np.random.default_rng(0), terminal=1.0)
    assert torch.equal(agent.compute_targets(batch), batch.reward)


def test_sac_td_target_matches_hand_computation():
    # Single transition against a closed-form target: the actor is pinned to
    # mean 0.3 / log-std -5 and the target critic to the constant Q = 2.
    seed = 123
    hp = HyperParams(gamma=0.9, init_temperature=0.01)
    agent = tiny_agent("sac", seed=seed, hp=hp)
    zero_network(agent.actor, {"mean": 0.3, "log_std": -5.0})
    zero_network(agent.critic_target, {"out": 2.0})

    rng = np.random.default_rng(0)
    batch = random_batch(rng, size=1)
    batch = batch._replace(reward=torch.tensor([0.7]), terminal=torch.zeros(1))

    eps = np.random.default_rng(np.random.SeedSequence([seed, ACTION_STREAM])).standard_normal(
        (1, 1), dtype=np.float64
    )[0, 0]
    raw = 0.3 + math.exp(-5.0) * eps
    a = math.tanh(raw)
    log_prob = (-0.5 * eps**2 + 5.0 - 0.5 * math.log(2 * math.pi)) - math.log(1 - a * a + 1e-6)
    y_hand = 0.7 + 0.9 * (2.0 - 0.01 * log_prob)

    y = agent.compute_targets(batch)
    assert float(y[0]) == pytest.approx(y_hand, rel=1e-5)


def test_sac_grad_step_counter():
    agent = tiny_agent("sac")
    rng = np.random.default_rng(1)
    for _ in range(7):
        agent.update(random_batch(rng))
    assert agent.grad_steps == 7


def test_sac_temperature_stays_positive():
    agent = tiny_agent("sac", hp=HyperParams(lr_temperature=1e-2))
    rng = np.random.default_rng(2)
    for _ in range(50):
        agent.update(random_batch(rng))
        assert agent.alpha > 0.0


def test_sac_masks_fixed_through_updates():
    agent = tiny_agent("sac", sparsity=0.7, seed=3)
    rng = np.random.default_rng(3)
    plans = {
        name: lin.mask.clone()
        for net in (agent.actor, agent.critic, agent.critic_target)
        for name, lin in net.masked_linears()
    }
    for _ in range(150):
        agent.update(random_batch(rng))
    for net in (agent.actor, agent.critic, agent.critic_target):
        for name, lin in net.masked_linears():
            assert torch.equal(lin.mask, plans[name])
            assert torch.all(lin.weight[lin.mask == 0] == 0.0)
    for (_, online), (_, target) in zip(
        agent.critic.masked_linears(), agent.critic_target.masked_linears()
    ):
        assert torch.equal(online.mask, target.mask)


def test_sac_reset_clears_moments_and_keeps_masks():
    agent = tiny_agent("sac", sparsity=0.5, seed=4)
    rng = np.random.default_rng(4)
    for _ in range(20):
        agent.update(random_batch(rng))
    sparsity_before = measured_sparsity(agent.critic)
    agent.reset(seed=999)
    assert measured_sparsity(agent.critic) == sparsity_before
    for opt in agent.optimizers().values():
        moment_sum = sum(
            float(s["exp_avg_sq"].sum()) for s in opt.state.values() if "exp_avg_sq" in s
        )
        assert moment_sum == 0.0
    for tp, op in zip(agent.critic_target.parameters(), agent.critic.parameters()):
        assert torch.equal(tp, op)


# ---------------------------------------------------------------------------
# DDPG


def test_ddpg_targets_gamma_zero_equal_reward():
    agent = tiny_agent("ddpg", hp=HyperParams(gamma=0.0))
    batch = random_batch(np.random.default_rng(0))
    assert torch.equal(agent.compute_targets(batch), batch.reward)


def test_ddpg_eval_is_exact_policy_mean():
    agent = tiny_agent("ddpg")
    obs = np.array([0.3, -0.5, 0.8])
    with torch.no_grad():
        mu = agent.actor(torch.as_tensor(obs, dtype=torch.float32).unsqueeze(0)).numpy()[0]
    np.testing.assert_array_equal(agent.act(obs, mode="eval"), mu)


def test_ddpg_zero_noise_explore_equals_eval():
    agent = tiny_agent("ddpg", hp=HyperParams(exploration_noise=0.0))
    obs = np.array([0.1, 0.2, 0.3])
    np.testing.assert_array_equal(agent.act(obs, "explore"), agent.act(obs, "eval"))


class _StubQ(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c = nn.Parameter(torch.tensor([c]))

    def forward(self, obs, action):
        return (action * self.c).sum(-1)


class _StubActor(nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = nn.Parameter(torch.as_tensor(w, dtype=torch.float32))

    def forward(self, obs):
        return torch.tanh(obs @ self.w.T)


def test_ddpg_actor_gradient_matches_hand_algebra():
    # Linear-Q toy problem: Q(s, a) = c * a and a 2-parameter tanh actor.
    # d(actor_loss)/dw = -c * (1 - tanh(w @ s)^2) * s
    import copy

    agent = tiny_agent("ddpg", obs_dim=2, hp=HyperParams(gamma=0.0))
    w0 = np.array([[0.4, -0.7]])
    agent.actor = _StubActor(w0)
    agent.critic = _StubQ(1.7)
    agent.actor_target = copy.deepcopy(agent.actor)
    agent.critic_target = copy.deepcopy(agent.critic)
    agent.actor_opt = torch.optim.AdamW(agent.actor.parameters(), lr=0.0)
    agent.critic_opt = torch.optim.AdamW(agent.critic.parameters(), lr=0.0)

    s = np.array([[0.4, -0.9]], dtype=np.float32)
    batch = Batch(
        state=torch.as_tensor(s),
        action=torch.tensor([[0.2]]),
        reward=torch.tensor([0.5]),
        next_state=torch.as_tensor(s),
        terminal=torch.zeros(1),
    )
    agent.update(batch)

    pre = float((w0 @ s[0])[0])
    want = -1.7 * (1.0 - math.tanh(pre) ** 2) * s[0]
    np.testing.assert_allclose(agent.actor.w.grad.numpy()[0], want, rtol=1e-5)


# ---------------------------------------------------------------------------
# streaming actor-critic


def test_stream_zero_td_error_leaves_parameters_unchanged():
    agent = tiny_agent("stream_ac")
    zero_network(agent.critic)  # V = 0 everywhere, so delta = 0 for r = 0
    before = [p.clone() for p in list(agent.actor.parameters()) + list(agent.critic.parameters())]
    tr = Transition(np.zeros(3), np.array([0.2]), 0.0, np.ones(3), False)
    out = agent.stream_step(tr)
    assert out["td_error"] == 0.0
    after = list(agent.actor.parameters()) + list(agent.critic.parameters())
    for b, a in zip(before, after):
        assert torch.equal(b, a)


def _oracle_stream(actor, critic, transitions, hp, cfg):
    """Independent hand-unrolled trace recursion on cloned networks."""
    z_a = [torch.zeros_like(p) for p in actor.parameters()]
    z_c = [torch.zeros_like(p) for p in critic.parameters()]

    def scale_for(delta, traces):
        if not cfg.step_normalization:
            return cfg.step_size
        z_norm = float(sum(z.abs().sum() for z in traces))
        bound = cfg.step_size * cfg.kappa * max(abs(delta), 1.0) * z_norm
        return cfg.step_size / max(1.0, bound)

    from sparse_rl.agents import gaussian_log_prob

    for tr in transitions:
        obs = torch.as_tensor(tr.state, dtype=torch.float32).unsqueeze(0)
        nxt = torch.as_tensor(tr.next_state, dtype=torch.float32).unsqueeze(0)
        with torch.no_grad():
            v_next = float(critic(nxt)[0])
        v = critic(obs)[0]
        delta = tr.reward + hp.gamma * (1 - float(tr.terminal)) * v_next - float(v.detach())
        grads = torch.autograd.grad(v, list(critic.parameters()))
        with torch.no_grad():
            for z, g in zip(z_c, grads):
                z.mul_(hp.gamma * cfg.trace_decay).add_(g)
            s = scale_for(delta, z_c)
            for z, p in zip(z_c, critic.parameters()):
                p.add_(z, alpha=s * delta)
        mean, log_std = actor(obs)
        lp = gaussian_log_prob(mean, log_std, torch.as_tensor(tr.action, dtype=torch.float32).unsqueeze(0))
        grads = torch.autograd.grad(lp.squeeze(0), list(actor.parameters()))
        with torch.no_grad():
            for z, g in zip(z_a, grads):
                z.mul_(hp.gamma * cfg.trace_decay).add_(g)
            s = scale_for(delta, z_a)
            for z, p in zip(z_a, actor.parameters()):
                p.add_(z, alpha=s * delta)
        if tr.terminal:
            for z in z_a + z_c:
                z.zero_()
    return z_a, z_c


@pytest.mark.parametrize("lam", [0.0, 0.8])
def test_stream_two_step_episode_matches_hand_unrolled_recursion(lam):
    import copy

    cfg = StreamConfig(trace_decay=lam)
    hp = HyperParams(gamma=0.9)
    agent = tiny_agent("stream_ac", seed=6, hp=hp, stream=cfg)
    actor_c = copy.deepcopy(agent.actor)
    critic_c = copy.deepcopy(agent.critic)

    rng = np.random.default_rng(7)
    transitions = [
        Transition(rng.normal(size=3), rng.uniform(-1, 1, 1), 1.0, rng.normal(size=3), False),
        Transition(rng.normal(size=3), rng.uniform(-1, 1, 1), -0.5, rng.normal(size=3), True),
    ]
    for tr in transitions:
        agent.stream_step(tr)
    _oracle_stream(actor_c, critic_c, transitions, hp, cfg)

    for p, q in zip(agent.actor.parameters(), actor_c.parameters()):
        torch.testing.assert_close(p, q, rtol=1e-6, atol=1e-7)
    for p, q in zip(agent.critic.parameters(), critic_c.parameters()):
        torch.testing.assert_close(p, q, rtol=1e-6, atol=1e-7)
    # terminal transition cleared the traces
    for z in agent.actor_traces + agent.critic_traces:
        assert torch.all(z == 0.0)


def test_stream_masked_trace_entries_stay_zero():
    agent = tiny_agent("stream_ac", sparsity=0.6, seed=8)
    rng = np.random.default_rng(8)
    for _ in range(10):
        tr = Transition(rng.normal(size=3), rng.uniform(-1, 1, 1), rng.normal(), rng.normal(size=3), False)
        agent.stream_step(tr)
    for net, traces in ((agent.actor, agent.actor_traces), (agent.critic, agent.critic_traces)):
        params = list(net.parameters())
        for _, lin in net.masked_linears():
            z = traces[next(i for i, p in enumerate(params) if p is lin.weight)]
            assert torch.all(z[lin.mask == 0] == 0.0)
            assert torch.all(lin.weight[lin.mask == 0] == 0.0)


def test_stream_agent_stores_no_experience():
    agent = tiny_agent("stream_ac")
    assert not hasattr(agent, "buffer")
    assert not hasattr(agent, "replay")


# ---------------------------------------------------------------------------
# action interface


@pytest.mark.parametrize("algo", ["sac", "ddpg", "stream_ac"])
def test_actions_always_within_bounds(algo):
    agent = tiny_agent(algo, seed=9)
    rng = np.random.default_rng(9)
    for _ in range(300):
        obs = rng.normal(size=3) * 5
        for mode in ("explore", "eval"):
            a = agent.act(obs, mode)
            assert a.shape == (1,)
            assert np.all(a >= -1.0) and np.all(a <= 1.0)


@pytest.mark.parametrize("algo", ["sac", "ddpg", "stream_ac"])
def test_eval_actions_are_deterministic(algo):
    agent = tiny_agent(algo, seed=10)
    obs = np.array([0.5, -0.25, 1.5])
    np.testing.assert_array_equal(agent.act(obs, "eval"), agent.act(obs, "eval"))


# ---------------------------------------------------------------------------
# factory


def test_make_agent_builds_each_algo():
    from sparse_rl.agents import make_agent

    for algo, cls_name in (("sac", "SACAgent"), ("ddpg", "DDPGAgent"), ("stream_ac", "StreamACAgent")):
        agent = make_agent(algo, obs_dim=3, action_dim=1, seed=0)
        assert type(agent).__name__ == cls_name
        assert agent.actor.spec.hidden == 128
        assert agent.critic.spec.hidden == 512
        assert agent.critic.spec.blocks == 2
        if algo == "stream_ac":
            assert agent.critic.spec.action_dim == 0
    with pytest.raises(ValueError):
        make_agent("q_learning", 3, 1)
