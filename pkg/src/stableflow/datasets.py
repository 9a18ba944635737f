"""Synthetic demonstration datasets and their file format.

Three desk-scale generators:

* morphing limit cycles: a planar closed curve r(theta, c) = base * (1 +
  a*c*sin(k*theta)) traversed at constant angular speed, with a scalar
  context c in [0, 1] that morphs the circle into a k-lobed star;
* obstacle avoidance: a classical potential-field expert (quadratic
  attraction to a goal, inverse repulsion inside a range around three
  obstacle disks); the 8-D context concatenates the obstacle positions and
  the goal;
* go-to in 7-D: a critically damped second-order system converging to a
  target produced by a fixed smooth nonlinear map of a 6-D context.

All generators are deterministic given a seed; per-trajectory generators are
spawned from the master seed so trajectory order never changes results.
Files are JSON with full-precision decimal floats; reads are schema checked
and reject unknown keys.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetFormatError, GenerationError, ValidationError

__all__ = [
    "Trajectory",
    "TrajectoryDataset",
    "MorphingCycleSpec",
    "ObstacleSceneSpec",
    "GoToTaskSpec",
    "gen_cycle_dataset",
    "gen_obstacle_dataset",
    "gen_goto_dataset",
    "read_dataset",
    "write_dataset",
]


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    contexts: np.ndarray


@dataclass
class TrajectoryDataset:
    """Sequences of (state, context) pairs with one shared time step."""

    dim_y: int
    dim_c: int
    dt: float
    trajectories: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim_y < 1 or self.dim_c < 0 or self.dt <= 0:
            raise ValidationError("need dim_y >= 1, dim_c >= 0, dt > 0")
        for i, traj in enumerate(self.trajectories):
            s, c = np.asarray(traj.states), np.asarray(traj.contexts)
            if s.ndim != 2 or s.shape[1] != self.dim_y:
                raise ValidationError(f"trajectory {i}: states must be (T, {self.dim_y})")
            if c.ndim != 2 or c.shape[1] != self.dim_c:
                raise ValidationError(f"trajectory {i}: contexts must be (T, {self.dim_c})")
            if len(s) != len(c):
                raise ValidationError(f"trajectory {i}: state/context lengths differ")
            if len(s) < 2:
                raise ValidationError(f"trajectory {i}: needs at least 2 samples")
            if not (np.all(np.isfinite(s)) and np.all(np.isfinite(c))):
                raise ValidationError(f"trajectory {i}: non-finite values")

    def __len__(self):
        return len(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(len(t.states) - 1 for t in self.trajectories)

    def transition_arrays(self):
        """All consecutive pairs pooled: (y_prev, y_next, c_prev) arrays."""
        yp = np.concatenate([t.states[:-1] for t in self.trajectories])
        yn = np.concatenate([t.states[1:] for t in self.trajectories])
        c = np.concatenate([t.contexts[:-1] for t in self.trajectories])
        return yp, yn, c

    def initial_arrays(self):
        y0 = np.stack([t.states[0] for t in self.trajectories])
        c0 = np.stack([t.contexts[0] for t in self.trajectories])
        return y0, c0

    def subset(self, indices) -> "TrajectoryDataset":
        return TrajectoryDataset(
            dim_y=self.dim_y, dim_c=self.dim_c, dt=self.dt,
            trajectories=[self.trajectories[i] for i in indices],
            provenance=dict(self.provenance),
        )


# -- morphing limit cycles ---------------------------------------------------

@dataclass(frozen=True)
class MorphingCycleSpec:
    """Closed curve r(theta, c) = base * (1 + amplitude*c*sin(lobes*theta))."""

    base_radius: float = 1.0
    amplitude: float = 0.3
    lobes: int = 5
    context: float = 0.0
    angular_speed: float = 1.0
    noise: float = 0.01
    samples_per_revolution: int = 48
    revolutions: float = 2.0

    def __post_init__(self):
        if self.base_radius <= 0:
            raise ValidationError("base_radius must be > 0")
        if not 0.0 <= self.context <= 1.0:
            raise ValidationError("context must lie in [0, 1]")
        if self.amplitude * self.context >= 1.0:
            raise ValidationError("amplitude*context must stay below 1 (simple curve)")
        if self.lobes < 2:
            raise ValidationError("lobes must be >= 2")
        if self.samples_per_revolution < 16:
            raise ValidationError("samples_per_revolution must be >= 16")
        if self.angular_speed <= 0 or self.revolutions <= 0 or self.noise < 0:
            raise ValidationError("angular_speed/revolutions must be > 0, noise >= 0")

    def radius(self, theta):
        return self.base_radius * (1.0 + self.amplitude * self.context
                                   * np.sin(self.lobes * np.asarray(theta)))

    def point(self, theta):
        r = self.radius(theta)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)

    @property
    def dt(self) -> float:
        return (2.0 * np.pi / self.angular_speed) / self.samples_per_revolution


def gen_cycle_dataset(specs, n_traj: int, seed: int) -> TrajectoryDataset:
    """Star-morph trajectories; context constant per trajectory, random phase."""
    if n_traj < 1:
        raise ValidationError("n_traj must be >= 1")
    specs = list(specs)
    if not specs:
        raise ValidationError("need at least one cycle spec")
    ref = specs[0]
    for s in specs[1:]:
        same = (s.base_radius == ref.base_radius and s.amplitude == ref.amplitude
                and s.lobes == ref.lobes and s.angular_speed == ref.angular_speed
                and s.samples_per_revolution == ref.samples_per_revolution)
        if not same:
            raise ValidationError("cycle specs must share geometry except the context")
    master = np.random.SeedSequence(seed)
    children = master.spawn(len(specs) * n_traj)
    trajectories = []
    for si, spec in enumerate(specs):
        n_samples = int(round(spec.samples_per_revolution * spec.revolutions))
        for j in range(n_traj):
            rng = np.random.default_rng(children[si * n_traj + j])
            theta0 = rng.uniform(0.0, 2.0 * np.pi)
            theta = theta0 + spec.angular_speed * spec.dt * np.arange(n_samples + 1)
            states = spec.point(theta)
            if spec.noise > 0:
                states = states + rng.normal(scale=spec.noise, size=states.shape)
            contexts = np.full((n_samples + 1, 1), spec.context)
            trajectories.append(Trajectory(states=states, contexts=contexts))
    return TrajectoryDataset(
        dim_y=2, dim_c=1, dt=ref.dt, trajectories=trajectories,
        provenance={"generator": "cycle", "seed": seed, "n_traj": n_traj,
                    "contexts": [s.context for s in specs],
                    "base_radius": ref.base_radius, "amplitude": ref.amplitude,
                    "lobes": ref.lobes, "angular_speed": ref.angular_speed,
                    "noise": ref.noise,
                    "samples_per_revolution": ref.samples_per_revolution,
                    "revolutions": ref.revolutions},
    )


# -- potential-field obstacle avoidance ---------------------------------------

@dataclass(frozen=True)
class ObstacleSceneSpec:
    """One scene: goal, exactly three obstacle disks, expert gains."""

    goal: np.ndarray
    obstacles: np.ndarray
    obstacle_radius: float = 0.12
    attract_gain: float = 1.0
    repulse_gain: float = 0.02
    repulse_range: float = 0.4
    dt: float = 0.05
    max_steps: int = 240

    def __post_init__(self):
        goal = np.asarray(self.goal, dtype=np.float64)
        obstacles = np.asarray(self.obstacles, dtype=np.float64)
        object.__setattr__(self, "goal", goal)
        object.__setattr__(self, "obstacles", obstacles)
        if goal.shape != (2,):
            raise ValidationError("goal must be a 2-D point")
        if obstacles.shape != (3, 2):
            raise ValidationError("exactly 3 obstacle positions required")
        if self.attract_gain <= 0 or self.repulse_gain <= 0:
            raise ValidationError("gains must be > 0")
        if self.obstacle_radius <= 0 or self.repulse_range <= self.obstacle_radius:
            raise ValidationError("need repulse_range > obstacle_radius > 0")
        if np.any(np.linalg.norm(obstacles - goal, axis=1) <= self.obstacle_radius):
            raise ValidationError("goal must lie outside every obstacle disk")

    @property
    def context(self) -> np.ndarray:
        return np.concatenate([self.obstacles.ravel(), self.goal])


def _expert_velocity(spec: ObstacleSceneSpec, x: np.ndarray) -> np.ndarray:
    v = spec.attract_gain * (spec.goal - x)
    for ob in spec.obstacles:
        delta = x - ob
        dist = np.linalg.norm(delta)
        if spec.obstacle_radius < dist < spec.repulse_range:
            mag = spec.repulse_gain * (1.0 / dist - 1.0 / spec.repulse_range) / dist ** 2
            v = v + mag * delta / dist
        elif dist <= spec.obstacle_radius:
            v = v + spec.repulse_gain * 100.0 * delta / max(dist, 1e-9)
    speed = np.linalg.norm(v)
    cap = 1.5
    return v * (cap / speed) if speed > cap else v


def _run_expert(spec: ObstacleSceneSpec, start: np.ndarray, rng,
                goal_tol: float, noise: float):
    x = start.astype(np.float64).copy()
    path = [x.copy()]
    for _ in range(spec.max_steps):
        x = x + _expert_velocity(spec, x) * spec.dt
        if noise > 0:
            x = x + rng.normal(scale=noise, size=2)
        path.append(x.copy())
        if np.linalg.norm(x - spec.goal) < goal_tol:
            break
    path = np.asarray(path)
    reached = np.linalg.norm(path[-1] - spec.goal) < goal_tol
    clearance = min(
        float(np.min(np.linalg.norm(path - ob, axis=1))) for ob in spec.obstacles
    )
    return path, reached, clearance


def gen_obstacle_dataset(n_scenes: int, seed: int, obstacle_radius: float = 0.12,
                         goal_tol: float = 0.02, clearance_margin: float = 0.02,
                         noise: float = 0.004, dt: float = 0.05,
                         max_retries: int = 50) -> TrajectoryDataset:
    """Potential-field expert runs over random scenes in the unit box.

    Scenes whose expert fails to reach the goal or shaves an obstacle are
    rejected and resampled; the rejection count lands in the provenance.
    """
    if n_scenes < 1:
        raise ValidationError("n_scenes must be >= 1")
    master = np.random.SeedSequence(seed)
    children = master.spawn(n_scenes)
    trajectories = []
    rejected = 0
    for i in range(n_scenes):
        rng = np.random.default_rng(children[i])
        placed = False
        for _ in range(max_retries):
            goal = rng.uniform(-1.0, 1.0, size=2)
            obstacles = rng.uniform(-1.0, 1.0, size=(3, 2))
            if np.any(np.linalg.norm(obstacles - goal, axis=1)
                      <= obstacle_radius + clearance_margin + goal_tol):
                rejected += 1
                continue
            start = rng.uniform(-1.2, 1.2, size=2)
            if (np.linalg.norm(start - goal) < 0.5
                    or np.any(np.linalg.norm(obstacles - start, axis=1)
                              <= obstacle_radius + clearance_margin)):
                rejected += 1
                continue
            spec = ObstacleSceneSpec(goal=goal, obstacles=obstacles,
                                     obstacle_radius=obstacle_radius, dt=dt)
            path, reached, clearance = _run_expert(spec, start, rng, goal_tol, noise)
            if not reached or clearance < obstacle_radius + clearance_margin:
                rejected += 1
                continue
            trajectories.append(Trajectory(
                states=path,
                contexts=np.broadcast_to(spec.context, (len(path), 8)).copy(),
            ))
            placed = True
            break
        if not placed:
            raise GenerationError(f"scene {i}: no valid expert run after {max_retries} tries")
    return TrajectoryDataset(
        dim_y=2, dim_c=8, dt=dt, trajectories=trajectories,
        provenance={"generator": "obstacle", "seed": seed, "n_scenes": n_scenes,
                    "obstacle_radius": obstacle_radius, "goal_tol": goal_tol,
                    "clearance_margin": clearance_margin, "noise": noise,
                    "rejected_scenes": rejected},
    )


# -- 7-D go-to -----------------------------------------------------------------

@dataclass(frozen=True)
class GoToTaskSpec:
    """Critically damped second-order reach task in 7-D with a 6-D context."""

    state_dim: int = 7
    context_dim: int = 6
    n_traj: int = 220
    n_steps: int = 80
    dt: float = 0.05
    stiffness: float = 2.0
    noise: float = 0.005

    def __post_init__(self):
        if self.state_dim < 1 or self.context_dim != 6:
            raise ValidationError("state_dim must be >= 1 and context_dim exactly 6")
        if self.n_traj < 1 or self.n_steps < 2:
            raise ValidationError("need n_traj >= 1 and n_steps >= 2")
        if self.dt <= 0 or self.stiffness <= 0 or self.noise < 0:
            raise ValidationError("dt/stiffness must be > 0, noise >= 0")


def goto_target_map(context: np.ndarray, state_dim: int = 7) -> np.ndarray:
    """Fixed smooth nonlinear map from 6-D context to the reach target."""
    c = np.asarray(context, dtype=np.float64)
    rng = np.random.default_rng(1234)  # fixed constants, independent of data seed
    a1 = rng.normal(scale=0.7, size=(8, 6))
    b1 = rng.normal(scale=0.3, size=8)
    a2 = rng.normal(scale=0.8, size=(state_dim, 8))
    b2 = rng.normal(scale=0.2, size=state_dim)
    return np.tanh(c @ a1.T + b1) @ a2.T + b2


def gen_goto_dataset(spec: GoToTaskSpec, seed: int) -> TrajectoryDataset:
    """Damped reaches to context-dependent targets from random starts."""
    master = np.random.SeedSequence(seed)
    children = master.spawn(spec.n_traj)
    lam = spec.stiffness
    trajectories = []
    for i in range(spec.n_traj):
        rng = np.random.default_rng(children[i])
        context = rng.uniform(-1.0, 1.0, size=spec.context_dim)
        target = goto_target_map(context, spec.state_dim)
        x = rng.uniform(-1.5, 1.5, size=spec.state_dim)
        v = np.zeros(spec.state_dim)
        states = [x.copy()]
        for _ in range(spec.n_steps):
            a = -2.0 * lam * v - lam * lam * (x - target)
            v = v + a * spec.dt
            x = x + v * spec.dt
            if spec.noise > 0:
                x = x + rng.normal(scale=spec.noise, size=spec.state_dim)
            states.append(x.copy())
        contexts = np.broadcast_to(context, (len(states), spec.context_dim)).copy()
        trajectories.append(Trajectory(states=np.asarray(states), contexts=contexts))
    return TrajectoryDataset(
        dim_y=spec.state_dim, dim_c=spec.context_dim, dt=spec.dt,
        trajectories=trajectories,
        provenance={"generator": "goto", "seed": seed, "n_traj": spec.n_traj,
                    "n_steps": spec.n_steps, "stiffness": spec.stiffness,
                    "noise": spec.noise},
    )


# -- file I/O ------------------------------------------------------------------

_TOP_KEYS = {"dim_y", "dim_c", "dt", "provenance", "trajectories"}
_TRAJ_KEYS = {"states", "contexts"}


def write_dataset(dataset: TrajectoryDataset, path) -> None:
    obj = {
        "dim_y": dataset.dim_y,
        "dim_c": dataset.dim_c,
        "dt": dataset.dt,
        "provenance": dataset.provenance,
        "trajectories": [
            {"states": t.states.tolist(), "contexts": t.contexts.tolist()}
            for t in dataset.trajectories
        ],
    }
    with open(path, "w") as fh:
        json.dump(obj, fh)


def read_dataset(path) -> TrajectoryDataset:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(
            f"malformed dataset file (line {exc.lineno}, col {exc.colno}): {exc.msg}"
        ) from exc
    if not isinstance(obj, dict):
        raise DatasetFormatError("dataset file must hold a JSON object")
    unknown = set(obj) - _TOP_KEYS
    if unknown:
        raise DatasetFormatError(f"unknown top-level keys: {sorted(unknown)}")
    missing = _TOP_KEYS - set(obj)
    if missing:
        raise DatasetFormatError(f"missing top-level keys: {sorted(missing)}")
    trajectories = []
    for i, t in enumerate(obj["trajectories"]):
        if not isinstance(t, dict):
            raise DatasetFormatError(f"trajectory {i} must be an object")
        unknown = set(t) - _TRAJ_KEYS
        if unknown:
            raise DatasetFormatError(f"trajectory {i}: unknown keys {sorted(unknown)}")
        states = np.asarray(t.get("states", []), dtype=np.float64)
        contexts = np.asarray(t.get("contexts", []), dtype=np.float64)
        if states.ndim != 2 or contexts.ndim != 2 or len(states) != len(contexts):
            raise ValidationError(f"trajectory {i}: mismatched state/context arrays")
        trajectories.append(Trajectory(states=states, contexts=contexts))
    try:
        return TrajectoryDataset(
            dim_y=int(obj["dim_y"]), dim_c=int(obj["dim_c"]), dt=float(obj["dt"]),
            trajectories=trajectories, provenance=dict(obj["provenance"]),
        )
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"bad scalar field: {exc}") from exc
