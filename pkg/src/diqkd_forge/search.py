"""Reinforcement-learning search over circuit-building actions.

An environment holds a circuit that grows one action at a time.  After each
accepted action the circuit parameters are re-optimized (warm-started from
the previous optimum) and the task reward is computed.  A PPO actor-critic
with a shared hidden layer chooses the actions.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import yaml
from torch import nn

from . import circuit as cm
from . import gaussian as gs
from .optimize import (
    OptimizationSettings, OptimizedCircuit, efficiency_sweep, optimize_circuit, transfer_parameters,
)
from .metrics import shaped_reward

log = logging.getLogger(__name__)

TASKS = ("lossless_rate", "loss_tolerance")
TOLERANCE_THRESHOLD = 1e-4


# -- actions ----------------------------------------------------------------


@dataclass(frozen=True)
class Action:
    location: str
    gate: cm.Gate

    @property
    def label(self) -> str:
        modes = "".join(str(m) for m in self.gate.modes)
        return f"{self.location}:{self.gate.name}{modes}"


class ActionSpace:
    """Fixed enumeration of preparation and measurement actions.

    Preparation: phase shifter and squeezer on every mode, then two-mode
    squeezer and beamsplitter on every pair.  Measurement: for each setting,
    a displacement along the direction orthogonal to the party's baseline, a
    squeezer (angle pinned to 0) and a phase shifter.
    """

    def __init__(self, n_modes: int, m_signal: int = 2):
        if m_signal != 2:
            raise ValueError("measurement actions assume single-mode parties (m_signal = 2)")
        self.n_modes, self.m_signal = n_modes, m_signal
        acts = []
        for i in range(n_modes):
            acts.append(Action("prep", cm.Gate("PS", (i,))))
            acts.append(Action("prep", cm.Gate("S", (i,))))
        pairs = [(i, j) for i in range(n_modes) for j in range(i + 1, n_modes)]
        for name in ("TMS", "BS"):
            acts += [Action("prep", cm.Gate(name, p)) for p in pairs]
        self.n_prep = len(acts)
        for party, disp, mode in (("alice", "Dp", 0), ("bob", "Dx", 1)):
            for s in range(cm.N_SETTINGS[party]):
                loc = f"{party}:{s}"
                acts.append(Action(loc, cm.Gate(disp, (mode,))))
                acts.append(Action(loc, cm.Gate("S", (mode,), (None, 0.0))))
                acts.append(Action(loc, cm.Gate("PS", (mode,))))
        self.actions = tuple(acts)

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, index: int) -> Action:
        return self.actions[index]

    def labels(self) -> list[str]:
        return [a.label for a in self.actions]


# -- state encoding ---------------------------------------------------------


def encoding_width(m_signal: int) -> int:
    return 2 * m_signal**2 + 3 * m_signal + 1


def encoding_length(n_modes: int, m_signal: int = 2) -> int:
    return 6 * 2 ** (n_modes - m_signal) * encoding_width(m_signal)


def encode_state(states: dict | None, n_modes: int, m_signal: int = 2) -> np.ndarray:
    """Concatenate (weight, upper-triangular Sigma, mu) of every branch for each (x, y).

    ``states`` maps setting pairs to pre-detection quasi-mixtures; missing
    branches (no-click heralds) and unavailable states are zero-padded.
    """
    width = encoding_width(m_signal)
    n_branch = 2 ** (n_modes - m_signal)
    out = np.zeros((6, n_branch, width))
    if states is not None:
        iu = np.triu_indices(2 * m_signal)
        for k, key in enumerate(sorted(states)):
            for b, (w, g) in enumerate(states[key].branches[:n_branch]):
                out[k, b] = np.concatenate(([w], g.sigma[iu], g.mu))
    out = np.nan_to_num(out.ravel(), nan=0.0, posinf=0.0, neginf=0.0)
    return out


# -- environment ------------------------------------------------------------


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    task_reward: float
    accepted: bool
    optimized: OptimizedCircuit | None


class CircuitEnv:
    """Circuit-building environment for one task.

    Non-signal modes are heralded on a click.  Step rewards are the increase
    of the episode's best task reward, starting from 0, so the return of an
    episode equals its best task reward (floored at 0).
    """

    def __init__(self, task: str = "lossless_rate", n_modes: int = 3, m_signal: int = 2,
                 settings: OptimizationSettings | None = None, max_actions: int = 15,
                 reward_weight: float = 1e-2, cache: dict | None = None, rng=None,
                 sweep_floor: float = 1e-3):
        if task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {task!r}")
        if max_actions < 1:
            raise ValueError("episode cap must be at least 1")
        self.task = task
        self.n_modes, self.m_signal = n_modes, m_signal
        self.settings = settings or OptimizationSettings()
        self.max_actions = max_actions
        self.reward_weight = reward_weight
        self.sweep_floor = sweep_floor
        self.cache = {} if cache is None else cache
        self.rng = np.random.default_rng(rng)
        self.actions = ActionSpace(n_modes, m_signal)
        self.observation_size = encoding_length(n_modes, m_signal)
        self.reset()

    def reset(self) -> np.ndarray:
        self.circuit = cm.simplify(cm.empty_circuit(self.n_modes, self.m_signal, "click"))
        self.optimum: OptimizedCircuit | None = None
        self.count = 0
        self.best = 0.0
        return np.zeros(self.observation_size)

    def _optimize(self, circuit: cm.CircuitSpec) -> OptimizedCircuit:
        key = hash(circuit)
        hit = self.cache.get(key)
        if hit is not None and hit.circuit == circuit:
            return hit
        det = gs.DetectorModel(1.0)
        if self.optimum is not None and self.optimum.objective > self.settings.dummy:
            warm, fresh = transfer_parameters(self.optimum.circuit, circuit, self.optimum.phi)
            res = optimize_circuit(circuit, det, warm=warm, fresh=fresh,
                                   settings=self.settings, rng=self.rng)
        else:
            res = optimize_circuit(circuit, det, settings=self.settings, rng=self.rng)
        self.cache[key] = res
        return res

    def task_reward(self, res: OptimizedCircuit) -> float:
        return task_reward(res, self.task, self.reward_weight, self.settings, self.rng,
                           self.sweep_floor)

    def observe(self, res: OptimizedCircuit | None) -> np.ndarray:
        if res is None or res.objective <= self.settings.dummy:
            return np.zeros(self.observation_size)
        try:
            states = cm.measurement_states(res.circuit, res.detector(), res.phi[:-1])
        except gs.SimulationError:
            states = None
        return encode_state(states, self.n_modes, self.m_signal)

    def step(self, index: int) -> StepResult:
        action = self.actions[int(index)]
        self.count += 1
        candidate = cm.simplify(self.circuit.with_gate(action.location, action.gate))
        accepted = candidate != self.circuit
        reward, value = 0.0, self.best
        if accepted:
            self.circuit = candidate
            self.optimum = self._optimize(candidate)
            value = self.task_reward(self.optimum)
            reward = max(value - self.best, 0.0)
            self.best = max(self.best, value)
        obs = self.observe(self.optimum)
        result = StepResult(obs, reward, self.count >= self.max_actions, value, accepted, self.optimum)
        if result.done:
            result = dataclasses.replace(result, observation=self.reset())
        return result


def task_reward(res: OptimizedCircuit, task: str, weight: float = 1e-2,
                settings: OptimizationSettings | None = None, rng=None,
                sweep_floor: float = 1e-3) -> float:
    """Shaped lossless reward, or the tolerated loss 1 - eta_min for the tolerance task."""
    settings = settings or OptimizationSettings()
    if task == "lossless_rate":
        if res.objective <= settings.dummy:
            return shaped_reward(settings.dummy, 0.0, weight)
        return shaped_reward(res.objective, res.report().S, weight)
    if task == "loss_tolerance":
        if res.objective < TOLERANCE_THRESHOLD:
            return 0.0
        sweep = efficiency_sweep(res.circuit, TOLERANCE_THRESHOLD, settings=settings, rng=rng,
                                 start_result=res, step_floor=sweep_floor)
        return 1.0 - sweep.eta_min if sweep.rows else 0.0
    raise ValueError(f"unknown task {task!r}")


# -- PPO --------------------------------------------------------------------


@dataclass(frozen=True)
class PPOParams:
    hidden: int = 256
    gamma: float = 0.99
    lam: float = 0.95
    horizon: int = 32
    clip: float = 0.1
    c_value: float = 0.5
    c_entropy: float = 1e-3
    n_envs: int = 10
    max_actions: int = 15
    reward_weight: float = 1e-2
    smoothing: float = 0.9
    learning_rate: float = 3e-4
    epochs: int = 4
    minibatch: int = 128

    def __post_init__(self):
        if not (0 < self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("need 0 < gamma <= 1 and 0 <= lambda <= 1")
        if not 0 < self.clip < 1:
            raise ValueError("clip range must lie in (0, 1)")
        if self.max_actions < 1 or self.horizon < 1 or self.n_envs < 1:
            raise ValueError("episode cap, horizon and environment count must be positive")
        if not 0 <= self.smoothing < 1:
            raise ValueError("smoothing weight must lie in [0, 1)")


def squash(obs: torch.Tensor) -> torch.Tensor:
    """Signed log scaling so large squeezing does not saturate the tanh layer."""
    return torch.sign(obs) * torch.log1p(obs.abs())


class ActorCritic(nn.Module):
    def __init__(self, obs_size: int, n_actions: int, hidden: int = 256):
        super().__init__()
        self.trunk = nn.Sequential(nn.Linear(obs_size, hidden), nn.Tanh())
        self.actor = nn.Linear(hidden, n_actions)
        self.critic = nn.Linear(hidden, 1)

    def forward(self, obs: torch.Tensor):
        h = self.trunk(squash(obs))
        return self.actor(h), self.critic(h).squeeze(-1)

    def distribution(self, obs: torch.Tensor) -> torch.distributions.Categorical:
        logits, _ = self(obs)
        return torch.distributions.Categorical(logits=logits)


def gae_advantages(rewards, values, dones, last_value: float, gamma: float = 0.99,
                   lam: float = 0.95) -> np.ndarray:
    """A_t = sum_k (gamma lam)^k delta_{t+k}, cut at episode ends.

    ``dones[t]`` marks that the episode ended after step t, so V(s_{t+1})
    is not bootstrapped there.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    T = rewards.size
    adv = np.zeros(T)
    running = 0.0
    for t in reversed(range(T)):
        next_value = last_value if t == T - 1 else values[t + 1]
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, clip: float) -> torch.Tensor:
    return torch.min(ratio * adv, torch.clamp(ratio, 1 - clip, 1 + clip) * adv)


def ppo_loss(policy: ActorCritic, obs, actions, old_logp, adv, targets, params: PPOParams):
    """Negative of J = L_clip - c1 L_value + c2 entropy, with its parts."""
    logits, values = policy(obs)
    dist = torch.distributions.Categorical(logits=logits)
    ratio = torch.exp(dist.log_prob(actions) - old_logp)
    l_clip = clipped_surrogate(ratio, adv, params.clip).mean()
    l_value = ((values - targets) ** 2).mean()
    entropy = dist.entropy().mean()
    J = l_clip - params.c_value * l_value + params.c_entropy * entropy
    return -J, {"clip": l_clip.item(), "value": l_value.item(), "entropy": entropy.item()}


def ppo_update(policy: ActorCritic, optimizer: torch.optim.Optimizer, batch: dict,
               params: PPOParams, generator: torch.Generator | None = None) -> float:
    """Run the epochs of minibatch steps; returns the mean loss (nan if aborted)."""
    n = batch["obs"].shape[0]
    snapshot = {k: v.clone() for k, v in policy.state_dict().items()}
    opt_snapshot = optimizer.state_dict()
    losses = []
    for _ in range(params.epochs):
        perm = torch.randperm(n, generator=generator)
        for start in range(0, n, params.minibatch):
            idx = perm[start:start + params.minibatch]
            loss, _ = ppo_loss(policy, batch["obs"][idx], batch["actions"][idx],
                               batch["logp"][idx], batch["adv"][idx], batch["targets"][idx], params)
            optimizer.zero_grad()
            loss.backward()
            grads = [p.grad for p in policy.parameters() if p.grad is not None]
            if not all(torch.isfinite(g).all() for g in grads) or not torch.isfinite(loss):
                log.error("non-finite gradient; update discarded")
                policy.load_state_dict(snapshot)
                optimizer.load_state_dict(opt_snapshot)
                return float("nan")
            optimizer.step()
            losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


def smooth(series, omega: float = 0.9) -> list[float]:
    out = []
    for t, x in enumerate(series):
        out.append(float(x) if t == 0 else out[-1] * omega + float(x) * (1 - omega))
    return out


@dataclass
class ArchiveEntry:
    objective: float
    reward: float
    step: int
    result: OptimizedCircuit


@dataclass
class TrainingResult:
    policy: ActorCritic
    archive: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    steps: int = 0
    interrupted: bool = False

    def metrics_csv(self) -> str:
        lines = ["step,mean_reward,smoothed_reward,loss,smoothed_loss"]
        for m in self.metrics:
            lines.append(",".join([str(m["step"])] + [f"{m[k]:.17g}" for k in
                                  ("mean_reward", "smoothed_reward", "loss", "smoothed_loss")]))
        return "\n".join(lines) + "\n"

    def write_archive(self, directory: str) -> list[str]:
        os.makedirs(directory, exist_ok=True)
        paths = []
        for k, entry in enumerate(self.archive):
            res = entry.result
            doc = cm.to_document(res.circuit.bind(res.phi[:-1]))
            doc["noise_p"] = float(res.phi[-1])
            doc["objective"] = float(entry.objective)
            path = os.path.join(directory, f"{entry.objective:.10f}_{k:04d}.yaml")
            with open(path, "w") as fh:
                fh.write(yaml.safe_dump(doc, sort_keys=False))
            paths.append(path)
        return paths


def train(task: str = "lossless_rate", n_modes: int = 3, budget: int = 0,
          params: PPOParams | None = None, settings: OptimizationSettings | None = None,
          seed: int = 0, checkpoint: str | None = None, sweep_floor: float = 1e-3) -> TrainingResult:
    """PPO over ``params.n_envs`` environments for ``budget`` environment steps in total."""
    params = params or PPOParams()
    seeds = np.random.SeedSequence(seed)
    torch_seed, *env_seeds = seeds.generate_state(params.n_envs + 1)
    gen = torch.Generator().manual_seed(int(torch_seed))
    torch.manual_seed(int(torch_seed))
    cache: dict = {}
    envs = [
        CircuitEnv(task, n_modes, settings=settings, max_actions=params.max_actions,
                   reward_weight=params.reward_weight, cache=cache, rng=int(s),
                   sweep_floor=sweep_floor)
        for s in env_seeds
    ]
    policy = ActorCritic(envs[0].observation_size, len(envs[0].actions), params.hidden)
    optimizer = torch.optim.Adam(policy.parameters(), lr=params.learning_rate)
    result = TrainingResult(policy)
    obs = [env.reset() for env in envs]
    returns = [0.0] * params.n_envs
    best = -math.inf
    raw_rewards, raw_losses = [], []
    try:
        while result.steps + params.n_envs <= budget:
            seg = min(params.horizon, (budget - result.steps) // params.n_envs)
            buf = {k: [[] for _ in envs] for k in ("obs", "act", "logp", "val", "rew", "done")}
            finished = []
            for _ in range(seg):
                with torch.no_grad():
                    o = torch.as_tensor(np.stack(obs), dtype=torch.float32)
                    logits, values = policy(o)
                    dist = torch.distributions.Categorical(logits=logits)
                    acts = dist.sample()
                    logps = dist.log_prob(acts)
                for e, env in enumerate(envs):
                    step = env.step(int(acts[e]))
                    result.steps += 1
                    for k, v in (("obs", obs[e]), ("act", int(acts[e])), ("logp", float(logps[e])),
                                 ("val", float(values[e])), ("rew", step.reward), ("done", step.done)):
                        buf[k][e].append(v)
                    returns[e] += step.reward
                    res = step.optimized
                    if step.accepted and res is not None and res.objective > best:
                        best = res.objective
                        result.archive.append(ArchiveEntry(res.objective, step.task_reward,
                                                           result.steps, res))
                        log.info("step %d: new best objective %.6f", result.steps, best)
                    if step.done:
                        finished.append(returns[e])
                        returns[e] = 0.0
                    obs[e] = step.observation
            with torch.no_grad():
                _, last_vals = policy(torch.as_tensor(np.stack(obs), dtype=torch.float32))
            advs, targets = [], []
            for e in range(params.n_envs):
                adv = gae_advantages(buf["rew"][e], buf["val"][e], buf["done"][e],
                                     float(last_vals[e]), params.gamma, params.lam)
                advs.append(adv)
                targets.append(adv + np.asarray(buf["val"][e]))
            batch = {
                "obs": torch.as_tensor(np.concatenate([np.stack(b) for b in buf["obs"]]), dtype=torch.float32),
                "actions": torch.as_tensor(np.concatenate(buf["act"]), dtype=torch.long),
                "logp": torch.as_tensor(np.concatenate(buf["logp"]), dtype=torch.float32),
                "adv": torch.as_tensor(np.concatenate(advs), dtype=torch.float32),
                "targets": torch.as_tensor(np.concatenate(targets), dtype=torch.float32),
            }
            loss = ppo_update(policy, optimizer, batch, params, gen)
            mean_reward = float(np.mean(finished)) if finished else float(np.mean(returns))
            raw_rewards.append(mean_reward)
            raw_losses.append(loss if math.isfinite(loss) else (raw_losses[-1] if raw_losses else 0.0))
            result.metrics.append({
                "step": result.steps, "mean_reward": mean_reward,
                "smoothed_reward": smooth(raw_rewards, params.smoothing)[-1],
                "loss": raw_losses[-1], "smoothed_loss": smooth(raw_losses, params.smoothing)[-1],
            })
            if checkpoint:
                torch.save({"policy": policy.state_dict(), "optimizer": optimizer.state_dict(),
                            "steps": result.steps}, checkpoint)
    except KeyboardInterrupt:
        result.interrupted = True
        if checkpoint:
            torch.save({"policy": policy.state_dict(), "optimizer": optimizer.state_dict(),
                        "steps": result.steps}, checkpoint)
    return result
