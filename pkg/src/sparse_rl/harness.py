"""Deterministic experiment execution, sweeps, and structured run logs.

A run is fully determined by its ``ExperimentConfig``: every random stream
(masks, weight init, environment resets, exploration, replay sampling, probe
selection) is derived from the config seed with a fixed tag, so re-running a
config reproduces masks bit-for-bit and the logged losses exactly.

Run logs are CSV files: ``# key=value`` metadata lines (the fully resolved
config plus derived facts such as parameter counts), then ``step,metric,value``
rows with metrics drawn from a fixed schema. Sweeps execute the Cartesian
product of sparsity/width/depth grids and seeds, each run isolated, and write
an aggregate ``summary.csv`` of final evaluation returns.
"""

from __future__ import annotations

import json
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .agents import (
    Batch,
    HyperParams,
    ReplayBuffer,
    StreamConfig,
    Transition,
    agent_specs,
    make_agent,
)
from .diagnostics import collect_diagnostics, reset_steps
from .envs import make_env
from .networks import NetworkSpec, build_network
from .sparsity import SparsityPlan, plan_er, plan_uniform, sparse_init_zeros

ALGOS = ("sac", "ddpg", "stream_ac")
METHODS = ("dense", "er", "uniform", "sparse_init")

# fixed metric schema for run CSVs
METRICS = frozenset(
    {
        "eval_return",
        "critic_loss",
        "actor_loss",
        "alpha",
        "srank",
        "dormant_ratio_actor",
        "dormant_ratio_critic",
        "fau",
        "grad_norm_actor",
        "grad_norm_critic",
        "param_norm_actor",
        "param_norm_critic",
        "cov_offdiag_mean",
        "measured_sparsity",
        "reset_event",
        "diverged",
    }
)

TAG_ENV = 1
TAG_EVAL = 2
TAG_REPLAY = 3
TAG_WARMUP = 4
TAG_PROBE = 5
TAG_RESET = 6

PROBE_BATCH = 256


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint32)[0])


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    algo: str = "sac"
    env_id: str = "pendulum"
    width_scale: int = 1
    depth_scale: int = 1
    sparsity: float = 0.0
    method: str = "dense"
    seed: int = 1
    total_steps: int = 50_000
    eval_every: int = 5_000
    eval_episodes: int = 10
    metrics_every: int = 10_000
    reset_interval: int | None = None
    overrides: dict = field(default_factory=dict)
    stream: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algo {self.algo!r}; choose from {ALGOS}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.width_scale < 1 or self.depth_scale < 1:
            raise ConfigError("width_scale and depth_scale must be integers >= 1")
        if not (0.0 <= self.sparsity < 1.0):
            raise ConfigError("sparsity must lie in [0, 1)")
        if self.method == "dense" and self.sparsity != 0.0:
            raise ConfigError("method 'dense' requires sparsity 0; pick er/uniform/sparse_init")
        if min(self.total_steps, self.eval_every, self.eval_episodes, self.metrics_every) < 1:
            raise ConfigError("step counts must be positive")
        if self.reset_interval is not None and self.reset_interval < 1:
            raise ConfigError("reset_interval must be positive")
        HyperParams().with_overrides(self.overrides)
        StreamConfig(**self.stream)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        doc = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)


class RunLog:
    """Ordered (step, metric, value) rows plus a resolved-config header."""

    def __init__(self, metadata: dict | None = None):
        self.metadata: dict = metadata or {}
        self.rows: list[tuple[int, str, float]] = []

    def add(self, step: int, metric: str, value: float) -> None:
        if metric not in METRICS:
            raise ValueError(f"metric {metric!r} not in the run-log schema")
        if self.rows and step < self.rows[-1][0]:
            raise ValueError("steps must be non-decreasing")
        self.rows.append((step, metric, float(value)))

    def values(self, metric: str) -> list[tuple[int, float]]:
        return [(s, v) for s, m, v in self.rows if m == metric]

    def final(self, metric: str) -> float | None:
        vals = self.values(metric)
        return vals[-1][1] if vals else None

    @property
    def diverged(self) -> bool:
        return any(m == "diverged" for _, m, _ in self.rows)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for key in sorted(self.metadata):
                fh.write(f"# {key}={json.dumps(self.metadata[key])}\n")
            fh.write("step,metric,value\n")
            for step, metric, value in self.rows:
                fh.write(f"{step},{metric},{value!r}\n")


def read_run_csv(path) -> RunLog:
    log = RunLog()
    with open(path) as fh:
        lines = fh.read().splitlines()
    body_start = 0
    for i, line in enumerate(lines):
        if line.startswith("# "):
            key, _, raw = line[2:].partition("=")
            log.metadata[key] = json.loads(raw)
        else:
            body_start = i
            break
    if body_start >= len(lines) or lines[body_start] != "step,metric,value":
        raise ValueError(f"{path}: missing 'step,metric,value' header")
    for lineno, line in enumerate(lines[body_start + 1 :], start=body_start + 2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ValueError(f"{path}: row {lineno}: expected 3 columns, got {len(parts)}")
        try:
            step = int(parts[0])
            value = float(parts[2])
        except ValueError:
            raise ValueError(f"{path}: row {lineno}: non-numeric step or value") from None
        if parts[1] not in METRICS:
            raise ValueError(f"{path}: row {lineno}: unknown metric {parts[1]!r}")
        log.add(step, parts[1], value)
    return log


def config_from_metadata(metadata: dict) -> ExperimentConfig:
    """Rebuild the config a log was produced from (runs are reproducible)."""
    kwargs = {}
    for f in fields(ExperimentConfig):
        if f.name in metadata:
            kwargs[f.name] = metadata[f.name]
    return ExperimentConfig(**kwargs)


# ---------------------------------------------------------------------------
# parameter accounting


def _network_param_count(spec: NetworkSpec) -> int:
    total = 0
    for shape in spec.layer_shapes():
        total += shape.weight_count + shape.fan_out  # weight + bias
    total += 2 * spec.hidden * spec.blocks  # block LayerNorms
    total += 2 * spec.hidden  # final LayerNorm
    return total


def count_parameters(
    specs: tuple[NetworkSpec, NetworkSpec], plan: SparsityPlan | None = None
) -> tuple[int, int]:
    """(total, learnable) over the actor-critic pair; ``learnable`` excludes
    masked-out weights. SparseInit attaches no masks, so everything counts."""
    total = sum(_network_param_count(s) for s in specs)
    masked_out = 0
    if plan is not None:
        names = {sh.name for s in specs for sh in s.layer_shapes()}
        for entry in plan.entries:
            if entry.name in names:
                shape_wc = next(
                    sh.weight_count for s in specs for sh in s.layer_shapes() if sh.name == entry.name
                )
                masked_out += shape_wc - entry.active_count
    return total, total - masked_out


def equal_parameter_scaling(
    anchor: tuple[NetworkSpec, NetworkSpec], larger: tuple[NetworkSpec, NetworkSpec]
) -> float:
    """Sparsity S for ``larger`` that matches the dense ``anchor``'s learnable
    parameter count (the equal-parameter scaling protocol)."""
    anchor_total, _ = count_parameters(anchor)
    larger_shapes = [sh for s in larger for sh in s.layer_shapes()]
    maskable = sum(sh.weight_count for sh in larger_shapes if sh.maskable)
    larger_total, _ = count_parameters(larger)
    unmaskable = larger_total - maskable
    needed_active = anchor_total - unmaskable
    if needed_active > maskable:
        raise ConfigError("larger spec has fewer maskable weights than the anchor needs")
    if needed_active < len(larger_shapes):
        raise ConfigError("anchor is too small: equal-parameter sparsity would empty layers")
    return 1.0 - needed_active / maskable


# ---------------------------------------------------------------------------
# run execution


class _JointWeights:
    def __init__(self, *nets):
        self.nets = nets

    def weight_matrices(self):
        for net in self.nets:
            yield from net.weight_matrices()


def _joint_measured_sparsity(agent) -> float:
    from .sparsity import measured_sparsity

    return measured_sparsity(_JointWeights(agent.actor, agent.critic))


def build_plan(config: ExperimentConfig, obs_dim: int, action_dim: int) -> SparsityPlan | None:
    """One plan over the actor and critic jointly, so a single global S
    governs both networks."""
    if config.method not in ("er", "uniform"):
        return None
    specs = agent_specs(config.algo, obs_dim, action_dim, config.width_scale, config.depth_scale)
    shapes = [sh for s in specs for sh in s.layer_shapes()]
    if config.method == "er":
        return plan_er(config.sparsity, shapes)
    return plan_uniform(config.sparsity, shapes)


def build_agent(config: ExperimentConfig, obs_dim: int, action_dim: int):
    hp = HyperParams().with_overrides(config.overrides)
    stream_cfg = StreamConfig(**config.stream)
    plan = build_plan(config, obs_dim, action_dim)
    a_spec, c_spec = agent_specs(
        config.algo, obs_dim, action_dim, config.width_scale, config.depth_scale
    )
    actor = build_network(a_spec, plan, config.seed)
    critic = build_network(c_spec, plan, config.seed)
    if config.method == "sparse_init":
        for net in (actor, critic):
            for name, lin in net.masked_linears():
                zeroed = sparse_init_zeros(
                    lin.weight.detach().numpy(),
                    config.sparsity,
                    derive_seed(config.seed, zlib.crc32(name.encode())),
                )
                with torch.no_grad():
                    lin.weight.copy_(torch.as_tensor(zeroed, dtype=lin.weight.dtype))
    agent = make_agent(
        config.algo, obs_dim, action_dim, config.width_scale, config.depth_scale,
        plan=plan, seed=config.seed, hp=hp, stream=stream_cfg, networks=(actor, critic),
    )
    return agent, plan, hp


def _evaluate(agent, env_id: str, seed: int, eval_index: int, episodes: int) -> float:
    env = make_env(env_id)
    returns = []
    for ep in range(episodes):
        obs = env.reset(derive_seed(seed, TAG_EVAL, eval_index, ep))
        total = 0.0
        while True:
            obs, reward, terminated, truncated = env.step(agent.act(obs, "eval"))
            total += reward
            if terminated or truncated:
                break
        returns.append(total)
    return float(np.mean(returns))


def _probe_batch(agent, buffer, env_id: str, seed: int, step: int, n: int = PROBE_BATCH):
    """Probe transitions for diagnostics: replay samples for off-policy
    agents, a fresh deterministic rollout otherwise."""
    if buffer is not None:
        if len(buffer) < 2:
            return None
        rng = np.random.default_rng(np.random.SeedSequence([seed, TAG_PROBE, step]))
        return buffer.sample(rng, min(n, len(buffer)))

    env = make_env(env_id)
    obs_dim, act_dim = env.spec.obs_dim, env.spec.action_dim
    states = np.zeros((n, obs_dim), dtype=np.float32)
    actions = np.zeros((n, act_dim), dtype=np.float32)
    rewards = np.zeros(n, dtype=np.float32)
    next_states = np.zeros((n, obs_dim), dtype=np.float32)
    terminals = np.zeros(n, dtype=np.float32)
    obs = env.reset(derive_seed(seed, TAG_PROBE, step))
    episode = 0
    for i in range(n):
        action = agent.act(obs, "eval")
        nxt, reward, terminated, truncated = env.step(action)
        states[i], actions[i], rewards[i] = obs, action, reward
        next_states[i], terminals[i] = nxt, float(terminated)
        if terminated or truncated:
            episode += 1
            obs = env.reset(derive_seed(seed, TAG_PROBE, step, episode))
        else:
            obs = nxt
    return Batch(
        state=torch.from_numpy(states),
        action=torch.from_numpy(actions),
        reward=torch.from_numpy(rewards),
        next_state=torch.from_numpy(next_states),
        terminal=torch.from_numpy(terminals),
    )


def _resolved_metadata(config, hp, plan, obs_dim, action_dim) -> dict:
    specs = agent_specs(config.algo, obs_dim, action_dim, config.width_scale, config.depth_scale)
    total, learnable = count_parameters(specs, plan)
    meta = asdict(config)
    meta.update(
        {
            "obs_dim": obs_dim,
            "action_dim": action_dim,
            "hyperparams": {
                k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(hp).items()
            },
            "total_params": total,
            "learnable_params": learnable,
            "plan_sparsity": (1.0 - plan.total_active / sum(
                sh.weight_count for s in specs for sh in s.layer_shapes()
            )) if plan is not None else 0.0,
        }
    )
    return meta


def run_experiment(
    config: ExperimentConfig,
    out_path=None,
    checkpoint_path=None,
    progress=None,
) -> RunLog:
    """Train one agent per the config; returns (and optionally writes) the log.

    ``progress(step, metric, value)``, when given, is invoked for evaluation
    and reset rows as they are produced.
    """
    config.validate()
    env = make_env(config.env_id)
    obs_dim, action_dim = env.spec.obs_dim, env.spec.action_dim
    agent, plan, hp = build_agent(config, obs_dim, action_dim)
    log = RunLog(_resolved_metadata(config, hp, plan, obs_dim, action_dim))

    streaming = config.algo == "stream_ac"
    buffer = None if streaming else ReplayBuffer(hp.replay_capacity, obs_dim, action_dim)
    replay_rng = np.random.default_rng(np.random.SeedSequence([config.seed, TAG_REPLAY]))
    warmup_rng = np.random.default_rng(np.random.SeedSequence([config.seed, TAG_WARMUP]))
    triggers = set(
        reset_steps(config.reset_interval, config.total_steps) if config.reset_interval else []
    )

    episode = 0
    eval_index = 0
    obs = env.reset(derive_seed(config.seed, TAG_ENV, episode))
    agent.observe(obs)
    diverged = False

    for step in range(1, config.total_steps + 1):
        if not streaming and step <= hp.warmup_steps:
            action = warmup_rng.uniform(-1.0, 1.0, size=action_dim)
        else:
            action = agent.act(obs, "explore")
        next_obs, reward, terminated, truncated = env.step(action)
        agent.observe(next_obs)
        tr = Transition(obs, action, reward, next_obs, terminated)

        if streaming:
            losses = agent.stream_step(tr)
            log.add(step, "critic_loss", losses["critic_loss"])
            log.add(step, "actor_loss", losses["actor_loss"])
            diverged = not all(np.isfinite(v) for v in losses.values())
        else:
            buffer.add(tr)
            if step > hp.warmup_steps and len(buffer) >= hp.batch_size:
                for _ in range(hp.replay_ratio):
                    losses = agent.update(buffer.sample(replay_rng, hp.batch_size))
                    log.add(step, "critic_loss", losses["critic_loss"])
                    log.add(step, "actor_loss", losses["actor_loss"])
                    if "alpha" in losses:
                        log.add(step, "alpha", losses["alpha"])
                    if not all(np.isfinite(v) for v in losses.values()):
                        diverged = True
                        break
        if diverged:
            log.add(step, "diverged", 1.0)
            break

        if terminated or truncated:
            if streaming:
                agent.end_episode()
            episode += 1
            obs = env.reset(derive_seed(config.seed, TAG_ENV, episode))
            agent.observe(obs)
        else:
            obs = next_obs

        if step in triggers:
            agent.reset(derive_seed(config.seed, TAG_RESET, step))
            log.add(step, "reset_event", 1.0)
            if progress is not None:
                progress(step, "reset_event", 1.0)

        if step % config.metrics_every == 0:
            probe = _probe_batch(agent, buffer, config.env_id, config.seed, step)
            if probe is not None:
                record = collect_diagnostics(agent, probe, step=step)
                for s, metric, value in record.as_rows():
                    log.add(s, metric, value)
            log.add(step, "measured_sparsity", _joint_measured_sparsity(agent))

        if step % config.eval_every == 0:
            score = _evaluate(agent, config.env_id, config.seed, eval_index, config.eval_episodes)
            log.add(step, "eval_return", score)
            if progress is not None:
                progress(step, "eval_return", score)
            eval_index += 1

    if out_path is not None:
        log.write_csv(out_path)
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(
            checkpoint_path, agent, config_doc=asdict(config), step=config.total_steps, plan=plan
        )
    return log


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepSetting:
    sparsity: float
    width_scale: int
    depth_scale: int

    def tag(self) -> str:
        return f"s{self.sparsity:g}_w{self.width_scale}_d{self.depth_scale}"


@dataclass
class SweepResult:
    settings: list[SweepSetting]
    logs: dict[tuple[SweepSetting, int], RunLog | None]
    errors: dict[tuple[SweepSetting, int], str]

    def summary_rows(self) -> list[dict]:
        rows = []
        for setting in self.settings:
            finals = []
            excluded = 0
            seeds = [seed for (s, seed) in self.logs if s == setting]
            for seed in seeds:
                run = self.logs[(setting, seed)]
                final = run.final("eval_return") if run is not None else None
                if run is None or run.diverged or final is None:
                    excluded += 1
                else:
                    finals.append(final)
            rows.append(
                {
                    "sparsity": setting.sparsity,
                    "width_scale": setting.width_scale,
                    "depth_scale": setting.depth_scale,
                    "seeds": len(seeds),
                    "excluded": excluded,
                    "final_return_mean": float(np.mean(finals)) if finals else float("nan"),
                    "final_return_sd": float(np.std(finals, ddof=0)) if finals else float("nan"),
                }
            )
        return rows

    def write_summary(self, path) -> None:
        rows = self.summary_rows()
        cols = ["sparsity", "width_scale", "depth_scale", "seeds", "excluded",
                "final_return_mean", "final_return_sd"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in rows:
                fh.write(",".join(repr(row[c]) for c in cols) + "\n")


def _sweep_worker(args):
    config, out_path = args
    log = run_experiment(config, out_path)
    return log


def run_sweep(
    base: ExperimentConfig,
    sparsity_grid: list[float],
    width_grid: list[int],
    depth_grid: list[int],
    seeds: list[int],
    out_dir=None,
    jobs: int = 1,
) -> SweepResult:
    """Cartesian product of grids x seeds, each run independent; per-run
    failures are recorded and excluded without aborting the sweep."""
    if not (sparsity_grid and width_grid and depth_grid and seeds):
        raise ConfigError("sweep grids and seeds must be non-empty")
    settings = [
        SweepSetting(s, w, d) for s in sparsity_grid for w in width_grid for d in depth_grid
    ]
    tasks = []
    for setting in settings:
        for seed in seeds:
            # a dense base config sweeps nonzero sparsities through ER masks
            method = base.method
            if setting.sparsity > 0.0 and method == "dense":
                method = "er"
            config = replace(
                base,
                sparsity=setting.sparsity,
                width_scale=setting.width_scale,
                depth_scale=setting.depth_scale,
                method=method,
                seed=seed,
            )
            out_path = None
            if out_dir is not None:
                out_path = Path(out_dir) / f"run_{config.algo}_{config.env_id}_{setting.tag()}_seed{seed}.csv"
            tasks.append(((setting, seed), config, out_path))

    logs: dict = {}
    errors: dict = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {key: pool.submit(_sweep_worker, (config, path)) for key, config, path in tasks}
            for key, fut in futures.items():
                try:
                    logs[key] = fut.result()
                except Exception as exc:  # noqa: BLE001 - failure isolation
                    logs[key] = None
                    errors[key] = str(exc)
    else:
        for key, config, path in tasks:
            try:
                logs[key] = run_experiment(config, path)
            except Exception as exc:  # noqa: BLE001 - failure isolation
                logs[key] = None
                errors[key] = str(exc)

    result = SweepResult(settings=settings, logs=logs, errors=errors)
    if out_dir is not None:
        result.write_summary(Path(out_dir) / "summary.csv")
    return result
