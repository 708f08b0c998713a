"""Synthetic multitask benchmarks: point-mass environments with multimodal
expert behavior, scripted experts, demonstration datasets, and success-rate
evaluation.

All dynamics are a velocity-command integrator (dt 0.1, speed clamp 1.0),
deterministic given (state, action); randomness enters only through reset
jitter and per-episode expert mode latches. Observation layouts are fixed per
family: 2-d tasks see [pos, object, goal] (6 dims), 1-d tasks see three
scalars ([agent, drawer, target] or [pos, left goal, right goal]).
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, as_f64
from .policy import ActionNormalizer, canonical_json, rollout

SUITES = ("reach4", "pick-side", "drawer-line", "bimodal1d", "continual12")
DATASET_FORMAT = "fdp-episodes"
DATASET_VERSION = 1

DT = 0.1
VMAX = 1.0


class UnknownSuiteError(ValueError):
    def __init__(self, name):
        super().__init__(f"unknown suite '{name}'; available: {', '.join(SUITES)}")


class DemoGenerationError(RuntimeError):
    """Scripted expert failed to produce enough successful episodes."""


@dataclass(frozen=True)
class EnvSpec:
    """Static description of one task: dynamics family, layout, success rule."""

    suite: str
    task: str
    task_index: int
    kind: str  # reach | pick_side | drawer | bimodal
    state_dim: int
    action_dim: int
    max_steps: int
    success_tol: float
    hold_steps: int
    layout: dict = field(default_factory=dict, hash=False)


def _reach_spec(suite, task, index, goal, max_steps=45):
    return EnvSpec(
        suite=suite,
        task=task,
        task_index=index,
        kind="reach",
        state_dim=6,
        action_dim=2,
        max_steps=max_steps,
        success_tol=0.12,
        hold_steps=3,
        layout={"goal": list(goal), "object": list(goal), "start_jitter": 0.05},
    )


def make_suite(name: str) -> list[EnvSpec]:
    """Task specs for a named suite; raises UnknownSuiteError otherwise."""
    if name == "reach4":
        goals = [(0.8, 0.0), (0.0, 0.8), (-0.8, 0.0), (0.0, -0.8)]
        return [
            _reach_spec("reach4", f"reach-{d}", i, g)
            for i, (d, g) in enumerate(zip("ENWS", goals))
        ]
    if name == "pick-side":
        specs = []
        for i, side in enumerate((1.0, -1.0)):
            obj = (0.55 * side, 0.0)
            goal = (0.95 * side, 0.0)
            specs.append(
                EnvSpec(
                    suite="pick-side",
                    task=f"pick-{'right' if side > 0 else 'left'}",
                    task_index=i,
                    kind="pick_side",
                    state_dim=6,
                    action_dim=2,
                    max_steps=60,
                    success_tol=0.12,
                    hold_steps=3,
                    layout={
                        "object": list(obj),
                        "goal": list(goal),
                        "detour": 0.38,
                        "start_jitter": 0.05,
                    },
                )
            )
        return specs
    if name == "drawer-line":
        specs = []
        for i, (task, target) in enumerate((("drawer-push", 0.75), ("drawer-pull", -0.05))):
            specs.append(
                EnvSpec(
                    suite="drawer-line",
                    task=task,
                    task_index=i,
                    kind="drawer",
                    state_dim=3,
                    action_dim=1,
                    max_steps=55,
                    success_tol=0.08,
                    hold_steps=3,
                    layout={
                        "drawer": 0.35,
                        "target": target,
                        "engage_dist": 0.05,
                        "start_jitter": 0.04,
                    },
                )
            )
        return specs
    if name == "bimodal1d":
        return [
            EnvSpec(
                suite="bimodal1d",
                task="bimodal",
                task_index=0,
                kind="bimodal",
                state_dim=3,
                action_dim=1,
                max_steps=30,
                success_tol=0.1,
                hold_steps=2,
                layout={"goals": [-0.6, 0.6], "start_jitter": 0.03},
            )
        ]
    if name == "continual12":
        specs = []
        for i in range(12):
            ang = 2.0 * np.pi * i / 12.0
            goal = (0.8 * np.cos(ang), 0.8 * np.sin(ang))
            specs.append(_reach_spec("continual12", f"reach-{i:02d}", i, goal))
        return specs
    raise UnknownSuiteError(name)


class PointMassEnv:
    """Velocity-command point mass with a latched success predicate.

    step() clamps the commanded velocity to the unit box times VMAX and
    integrates with DT; success latches after hold_steps consecutive steps
    inside the tolerance and stays latched.
    """

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.task_id = spec.task_index
        self.pos = None
        self.drawer = None
        self.engaged = False
        self.success = False
        self._hold = 0
        self.steps = 0

    def reset(self, rng: Rng) -> np.ndarray:
        d = 2 if self.spec.state_dim == 6 else 1
        jitter = self.spec.layout.get("start_jitter", 0.0)
        self.pos = rng.gaussian(d) * jitter
        if self.spec.kind == "drawer":
            self.drawer = float(self.spec.layout["drawer"])
            self.engaged = False
        self.success = False
        self._hold = 0
        self.steps = 0
        return self.observation()

    def observation(self) -> np.ndarray:
        lay = self.spec.layout
        if self.spec.kind in ("reach", "pick_side"):
            return np.concatenate([self.pos, lay["object"], lay["goal"]])
        if self.spec.kind == "drawer":
            return np.array([self.pos[0], self.drawer, lay["target"]])
        if self.spec.kind == "bimodal":
            return np.array([self.pos[0], lay["goals"][0], lay["goals"][1]])
        raise ValueError(f"unknown env kind '{self.spec.kind}'")

    def _target_error(self) -> float:
        lay = self.spec.layout
        if self.spec.kind in ("reach", "pick_side"):
            return float(np.linalg.norm(self.pos - np.asarray(lay["goal"])))
        if self.spec.kind == "drawer":
            return abs(self.drawer - lay["target"])
        return min(abs(self.pos[0] - g) for g in lay["goals"])

    def step(self, action) -> np.ndarray:
        action = np.clip(as_f64(action, "action"), -1.0, 1.0)
        if action.shape != (self.spec.action_dim,):
            raise ValueError(
                f"action shape {action.shape} != ({self.spec.action_dim},)"
            )
        self.pos = self.pos + action * VMAX * DT
        if self.spec.kind == "drawer":
            if not self.engaged and abs(self.pos[0] - self.drawer) <= self.spec.layout[
                "engage_dist"
            ]:
                self.engaged = True
            if self.engaged:
                self.drawer = float(self.pos[0])
        self.steps += 1
        if self._target_error() < self.spec.success_tol:
            self._hold += 1
        else:
            self._hold = 0
        if self._hold >= self.spec.hold_steps:
            self.success = True  # latched
        return self.observation()


def make_env(spec: EnvSpec) -> PointMassEnv:
    return PointMassEnv(spec)


# ---------------------------------------------------------------------------
# Scripted experts
# ---------------------------------------------------------------------------

EXPERT_GAIN = 3.0


def scripted_expert(spec: EnvSpec, state: np.ndarray, rng: Rng, latch: dict) -> np.ndarray:
    """Proportional control toward phase-dependent waypoints.

    latch carries per-episode mode decisions (created by expert_latch); it is
    mutated to track phase transitions. Actions are clamped to the unit box.
    """
    state = as_f64(state, "state")
    if spec.kind == "reach":
        target = np.asarray(spec.layout["goal"])
        err = target - state[:2]
    elif spec.kind == "pick_side":
        obj = np.asarray(spec.layout["object"])
        goal = np.asarray(spec.layout["goal"])
        direction = goal - obj
        perp = np.array([-direction[1], direction[0]])
        perp = perp / np.linalg.norm(perp)
        waypoint = obj + latch["side"] * spec.layout["detour"] * perp
        pos = state[:2]
        if not latch.get("past_detour") and np.linalg.norm(pos - waypoint) < 0.12:
            latch["past_detour"] = True
        err = (goal if latch.get("past_detour") else waypoint) - pos
    elif spec.kind == "drawer":
        agent, drawer, target = state
        if abs(agent - drawer) > spec.layout["engage_dist"] * 0.8 and not latch.get(
            "engaged"
        ):
            err = np.array([drawer - agent])
        else:
            latch["engaged"] = True
            err = np.array([target - agent])
    elif spec.kind == "bimodal":
        goal = spec.layout["goals"][latch["mode"]]
        err = np.array([goal - state[0]])
    else:
        raise ValueError(f"no expert for env kind '{spec.kind}'")
    return np.clip(EXPERT_GAIN * err, -1.0, 1.0)


def expert_latch(spec: EnvSpec, rng: Rng) -> dict:
    """Per-episode mode decisions; multimodal tasks pick a branch here."""
    if spec.kind == "pick_side":
        return {"side": 1.0 if rng.uniform(1)[0] < 0.5 else -1.0}
    if spec.kind == "bimodal":
        return {"mode": 0 if rng.uniform(1)[0] < 0.5 else 1}
    return {}


class ExpertPolicy:
    """Scripted expert behind the same controller surface the rollout harness
    drives, so experts and learned policies share one evaluation path."""

    def episode_controller(self, env, rng: Rng, top_k=None, weights_override=None):
        return _ExpertController(env.spec, rng)


class _ExpertController:
    def __init__(self, spec, rng):
        self.spec = spec
        self.latch = expert_latch(spec, rng)
        self.rng = rng

    def action(self, obs):
        return scripted_expert(self.spec, obs, self.rng, self.latch), None


# ---------------------------------------------------------------------------
# Episodes and datasets
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    task: str
    task_id: int
    observations: np.ndarray  # (L, state_dim)
    actions: np.ndarray  # (L, action_dim)
    success: bool

    def __post_init__(self):
        self.observations = as_f64(self.observations, "observations")
        self.actions = as_f64(self.actions, "actions")
        if len(self.observations) != len(self.actions):
            raise ValueError("episode observations and actions must align")

    def __len__(self):
        return len(self.actions)


@dataclass
class EpisodeDataset:
    """Episodes grouped by task plus the action-normalizer statistics."""

    suite: str
    state_dim: int
    action_dim: int
    seed: int
    episodes: list
    normalizer_lo: np.ndarray
    normalizer_hi: np.ndarray

    def episodes_by_task(self) -> dict[str, list]:
        out: dict[str, list] = {}
        for ep in self.episodes:
            out.setdefault(ep.task, []).append(ep)
        return out

    def task_names(self) -> list[str]:
        seen = []
        for ep in self.episodes:
            if ep.task not in seen:
                seen.append(ep.task)
        return seen

    def normalizer_json(self) -> dict:
        return {"lo": self.normalizer_lo.tolist(), "hi": self.normalizer_hi.tolist()}

    def save(self, path) -> None:
        """Line-delimited records: one header line, then one episode per line."""
        header = {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "suite": self.suite,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "seed": self.seed,
            "normalizer": self.normalizer_json(),
        }
        with open(path, "w") as f:
            f.write(canonical_json(header) + "\n")
            for ep in self.episodes:
                rec = {
                    "task": ep.task,
                    "task_id": ep.task_id,
                    "observations": ep.observations.tolist(),
                    "actions": ep.actions.tolist(),
                    "success": ep.success,
                }
                f.write(canonical_json(rec) + "\n")

    @classmethod
    def load(cls, path) -> "EpisodeDataset":
        with open(path) as f:
            header = json.loads(f.readline())
            if header.get("format") != DATASET_FORMAT:
                raise ValueError(f"not an episode dataset: {path}")
            episodes = [
                Episode(
                    task=rec["task"],
                    task_id=rec["task_id"],
                    observations=np.asarray(rec["observations"]),
                    actions=np.asarray(rec["actions"]),
                    success=rec["success"],
                )
                for rec in map(json.loads, f)
            ]
        return cls(
            suite=header["suite"],
            state_dim=header["state_dim"],
            action_dim=header["action_dim"],
            seed=header["seed"],
            episodes=episodes,
            normalizer_lo=np.asarray(header["normalizer"]["lo"]),
            normalizer_hi=np.asarray(header["normalizer"]["hi"]),
        )


def merge_datasets(a: EpisodeDataset, b: EpisodeDataset) -> EpisodeDataset:
    if (a.state_dim, a.action_dim) != (b.state_dim, b.action_dim):
        raise ValueError("cannot merge datasets with different dimensions")
    return EpisodeDataset(
        suite=f"{a.suite}+{b.suite}" if a.suite != b.suite else a.suite,
        state_dim=a.state_dim,
        action_dim=a.action_dim,
        seed=a.seed,
        episodes=list(a.episodes) + list(b.episodes),
        normalizer_lo=np.minimum(a.normalizer_lo, b.normalizer_lo),
        normalizer_hi=np.maximum(a.normalizer_hi, b.normalizer_hi),
    )


def sample_replay(dataset: EpisodeDataset, per_task: int, seed: int) -> EpisodeDataset:
    """Seeded per-task subsample used as a retention replay buffer."""
    rng = Rng(seed)
    kept = []
    for t, (task, eps) in enumerate(sorted(dataset.episodes_by_task().items())):
        order = rng.child(t).permutation(len(eps))
        kept.extend(eps[i] for i in order[: min(per_task, len(eps))])
    return EpisodeDataset(
        suite=f"{dataset.suite}-replay",
        state_dim=dataset.state_dim,
        action_dim=dataset.action_dim,
        seed=seed,
        episodes=kept,
        normalizer_lo=dataset.normalizer_lo,
        normalizer_hi=dataset.normalizer_hi,
    )


def run_expert_episode(spec: EnvSpec, rng: Rng) -> Episode:
    """One scripted-expert rollout recorded as (observation, action) pairs."""
    env = make_env(spec)
    obs = env.reset(rng.child(0))
    latch = expert_latch(spec, rng.child(1))
    act_rng = rng.child(2)
    obs_list, act_list = [], []
    while env.steps < spec.max_steps and not env.success:
        a = scripted_expert(spec, obs, act_rng, latch)
        obs_list.append(obs)
        act_list.append(a)
        obs = env.step(a)
    return Episode(
        task=spec.task,
        task_id=spec.task_index,
        observations=np.asarray(obs_list),
        actions=np.asarray(act_list),
        success=env.success,
    )


def generate_demos(specs, per_task: int, seed: int) -> EpisodeDataset:
    """Expert demonstrations: per_task successful episodes per spec.

    Failures are resampled (fresh seed stream) up to 10x per_task attempts;
    exceeding that raises DemoGenerationError naming the task.
    """
    if isinstance(specs, str):
        specs = make_suite(specs)
    if per_task < 1:
        raise ValueError("per_task must be >= 1")
    root = Rng(seed)
    episodes = []
    for spec in specs:
        kept = 0
        for attempt in range(10 * per_task):
            ep = run_expert_episode(spec, root.child(spec.task_index, attempt))
            if ep.success:
                episodes.append(ep)
                kept += 1
                if kept == per_task:
                    break
        if kept < per_task:
            raise DemoGenerationError(
                f"expert reached only {kept}/{per_task} successes on task "
                f"'{spec.task}' after {10 * per_task} attempts"
            )
    all_actions = np.concatenate([ep.actions for ep in episodes], axis=0)
    norm = ActionNormalizer.from_actions(all_actions)
    return EpisodeDataset(
        suite=specs[0].suite if len({s.suite for s in specs}) == 1 else "mixed",
        state_dim=specs[0].state_dim,
        action_dim=specs[0].action_dim,
        seed=seed,
        episodes=episodes,
        normalizer_lo=norm.lo,
        normalizer_hi=norm.hi,
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class SuccessTable:
    """Per-task success rates: mean and standard error over seeds."""

    tasks: list
    per_seed: dict  # task -> list of per-seed rates, seed order
    seeds: list
    episodes_per_task: int

    def mean(self, task: str) -> float:
        return float(np.mean(self.per_seed[task]))

    def stderr(self, task: str) -> float:
        rates = np.asarray(self.per_seed[task])
        if len(rates) < 2:
            return 0.0
        return float(rates.std(ddof=1) / np.sqrt(len(rates)))

    def average(self) -> float:
        return float(np.mean([self.mean(t) for t in self.tasks]))

    def average_stderr(self) -> float:
        per_seed_avg = np.mean([self.per_seed[t] for t in self.tasks], axis=0)
        if len(per_seed_avg) < 2:
            return 0.0
        return float(per_seed_avg.std(ddof=1) / np.sqrt(len(per_seed_avg)))

    def to_json(self) -> dict:
        return {
            "tasks": [
                {"task": t, "mean_success": self.mean(t), "stderr": self.stderr(t)}
                for t in self.tasks
            ],
            "average": self.average(),
            "average_stderr": self.average_stderr(),
            "seeds": list(self.seeds),
            "episodes_per_task": self.episodes_per_task,
            "per_seed": {t: list(map(float, v)) for t, v in self.per_seed.items()},
        }

    def to_csv(self) -> str:
        lines = ["task,mean_success,stderr"]
        for t in self.tasks:
            lines.append(f"{t},{self.mean(t)!r},{self.stderr(t)!r}")
        lines.append(f"average,{self.average()!r},{self.average_stderr()!r}")
        return "\n".join(lines) + "\n"


def _eval_unit(args):
    policy, spec, seed, episodes, top_k = args
    hits = 0
    for ep_idx in range(episodes):
        rng = Rng(seed).child(0xE7A1, spec.task_index, ep_idx)
        result = rollout(policy, make_env(spec), spec.max_steps, rng, top_k=top_k)
        hits += int(result.success)
    return hits / episodes if episodes else 0.0


def evaluate(
    policy,
    specs,
    episodes_per_task: int = 40,
    seeds=(0, 1, 2, 3, 4),
    top_k: int | None = None,
    jobs: int = 1,
) -> SuccessTable:
    """Success table over tasks x seeds. Episode streams derive from
    (seed, task, episode index) so the result is independent of job count."""
    if isinstance(specs, str):
        specs = make_suite(specs)
    seeds = list(seeds)
    units = [
        (policy, spec, seed, episodes_per_task, top_k)
        for spec in specs
        for seed in seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rates = list(pool.map(_eval_unit, units))
    else:
        rates = [_eval_unit(u) for u in units]
    per_seed = {}
    for i, spec in enumerate(specs):
        per_seed[spec.task] = rates[i * len(seeds) : (i + 1) * len(seeds)]
    return SuccessTable(
        tasks=[s.task for s in specs],
        per_seed=per_seed,
        seeds=seeds,
        episodes_per_task=episodes_per_task,
    )
