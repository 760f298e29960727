"""Case-study environments: known agent dynamics, initial-state sampling,
scripted behaviors standing in for the unknown environment distribution,
rollout machinery, and expert dataset generation.

Instances are stateless after construction; stepping and sampling are pure
given their inputs, so batched rollouts can fan out freely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import stl, tape
from .dataio import Dataset, LabeledTrajectory
from .inference import SignalNorm
from .policy import ControlBox, PolicyCell, PolicyParams, policy_step_np, zero_hidden


class ExpertFailure(RuntimeError):
    """A scripted expert kept violating its own task; inputs are off."""


class NonFiniteState(ArithmeticError):
    """Rollout produced NaN or infinity."""


@dataclass(frozen=True)
class Region:
    name: str
    cx: float
    cy: float
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"region {self.name}: radius must be positive")

    def distance(self, x: float, y: float) -> float:
        return math.hypot(x - self.cx, y - self.cy)


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def unicycle_step(x, u):
    """(px, py, heading) advanced by controls (speed, turn rate)."""
    px, py, th = float(x[0]), float(x[1]), float(x[2])
    v, w = float(u[0]), float(u[1])
    return np.array([px + v * math.cos(th), py + v * math.sin(th), th + w])


def ego_step(x, a):
    """Double integrator: position += velocity; velocity += acceleration."""
    p, v = float(x[0]), float(x[1])
    return np.array([p + v, v + float(a)])


def preprocess_distances(raw: np.ndarray, regions) -> np.ndarray:
    """Euclidean distances from (px, py) rows to each region center."""
    raw = np.asarray(raw, dtype=float)
    pos = raw[:, :2]
    cols = [
        np.sqrt(((pos - [r.cx, r.cy]) ** 2).sum(axis=1)) for r in regions
    ]
    return np.stack(cols, axis=1)


class UnicycleEnv:
    """Reach region A or B, then region C, avoiding a round obstacle.

    The dataset view of a trajectory is the distance signal
    (dA, dB, dC, dO); the environment itself is static.
    """

    name = "unicycle"

    def __init__(self, **overrides):
        self.T = 20
        self.region_a = Region("RegA", 1.0, 9.0, 1.0)
        self.region_b = Region("RegB", 7.0, 2.0, 0.86)
        self.region_c = Region("RegC", 9.0, 9.0, 0.7)
        self.obstacle = Region("Obs", 5.0, 8.0, 1.0)
        self.init_lo = np.array([0.5, 0.5, 0.0])
        self.init_hi = np.array([2.0, 2.0, math.pi / 2])
        self.control_box = ControlBox((0.0, -math.pi / 4), (1.0, math.pi / 4))
        self.obstacle_margin = 1.5  # repulsion kicks in inside this range
        for k, v in overrides.items():
            if not hasattr(self, k):
                raise TypeError(f"unknown unicycle option {k!r}")
            setattr(self, k, v)
        self.n_agent = 3
        self.n_env = 0
        self.agent_names = ("px", "py", "theta")
        self.env_names = ()
        self.inference_names = ("dA", "dB", "dC", "dO")
        # fixed bounds for the policy's input normalization
        self.state_norm = SignalNorm(
            mid=(5.0, 5.0, 0.0), halfrange=(5.0, 5.0, 2.0 * math.pi)
        )

    @property
    def regions(self):
        return (self.region_a, self.region_b, self.region_c, self.obstacle)

    def config(self) -> dict:
        return {
            "name": self.name,
            "T": self.T,
            "regions": {
                r.name: [r.cx, r.cy, r.radius] for r in self.regions
            },
            "control_box": [list(self.control_box.lo), list(self.control_box.hi)],
            "init_box": [self.init_lo.tolist(), self.init_hi.tolist()],
        }

    def step_np(self, x, u):
        return unicycle_step(x, u)

    def step_rows(self, x_row, u):
        px, py, th = x_row[0], x_row[1], x_row[2]
        v, w = u[0], u[1]
        return [px + v * tape.cos(th), py + v * tape.sin(th), th + w]

    def sample_initial(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.init_lo, self.init_hi)

    def empty_env_traj(self) -> np.ndarray:
        return np.zeros((self.T + 1, 0))

    def inference_map_np(self, raw: np.ndarray) -> np.ndarray:
        return preprocess_distances(raw, self.regions)

    def inference_rows(self, rows):
        out = []
        for row in rows:
            px, py = row[0], row[1]
            drow = []
            for r in self.regions:
                dx = px - r.cx
                dy = py - r.cy
                drow.append(tape.sqrt(dx * dx + dy * dy + 1e-12))
            out.append(drow)
        return out

    def task_formula(self) -> stl.Formula:
        """Lenient exact-semantics description of the scripted task; used
        to vet generated expert data."""
        ra, rb = self.region_a.radius, self.region_b.radius
        rc, ro = self.region_c.radius, self.obstacle.radius
        text = (
            f"(F[0,16](dA <= {ra}) | F[0,16](dB <= {rb}))"
            f" & F[8,{self.T}](dC <= {rc})"
            f" & G[0,{self.T}](dO >= {ro})"
        )
        return stl.parse(text, self.inference_names)

    def raw_to_traj(self, raw, label, id_, meta=None) -> LabeledTrajectory:
        return LabeledTrajectory(
            id=id_,
            label=label,
            agent=self.inference_map_np(raw),
            env=np.zeros((raw.shape[0], 0)),
            agent_names=self.inference_names,
            env_names=(),
            meta={"env": self.name, **(meta or {})},
        )

    # -- scripted expert ------------------------------------------------

    def _steer(self, x, target, rng):
        px, py, th = x
        dx, dy = target[0] - px, target[1] - py
        # repulsive component near the obstacle
        d_obs = self.obstacle.distance(px, py)
        if d_obs < self.obstacle_margin:
            push = (self.obstacle_margin - d_obs) / self.obstacle_margin
            ox = (px - self.obstacle.cx) / max(d_obs, 1e-6)
            oy = (py - self.obstacle.cy) / max(d_obs, 1e-6)
            dx += 2.5 * push * ox
            dy += 2.5 * push * oy
        desired = math.atan2(dy, dx)
        err = _wrap_angle(desired - th)
        w_lo, w_hi = self.control_box.lo[1], self.control_box.hi[1]
        w = float(np.clip(err + rng.normal(0, 0.02), w_lo, w_hi))
        dist = math.hypot(target[0] - px, target[1] - py)
        v = min(dist, 1.0) * (0.25 + 0.75 * max(0.0, math.cos(err)))
        v = float(np.clip(v + rng.normal(0, 0.03), 0.0, 1.0))
        return np.array([v, w])

    def _expert_rollout(self, rng) -> np.ndarray:
        x = self.sample_initial(rng)
        first = (
            self.region_a
            if self.region_a.distance(x[0], x[1]) < self.region_b.distance(x[0], x[1])
            else self.region_b
        )
        # aim slightly inside the region, jittered per trajectory
        ang = rng.uniform(0, 2 * math.pi)
        rad = rng.uniform(0, 0.3) * first.radius
        tgt1 = (first.cx + rad * math.cos(ang), first.cy + rad * math.sin(ang))
        tgt2 = (self.region_c.cx, self.region_c.cy)
        states = [x.copy()]
        reached_first = False
        for _ in range(self.T):
            if not reached_first and first.distance(x[0], x[1]) <= 0.7 * first.radius:
                reached_first = True
            u = self._steer(x, tgt2 if reached_first else tgt1, rng)
            x = self.step_np(x, u)
            states.append(x.copy())
        return np.array(states)

    def gen_expert(self, n: int, rng: np.random.Generator, start_id: int = 0) -> Dataset:
        """Positive demonstrations, each vetted against task_formula."""
        task = self.task_formula()
        out = []
        for i in range(n):
            for attempt in range(10):
                raw = self._expert_rollout(rng)
                sig = stl.Signal(self.inference_map_np(raw), self.inference_names)
                if stl.robustness(sig, task, 0) >= 0.0:
                    break
            else:
                raise ExpertFailure(f"unicycle expert failed 10 attempts at sample {i}")
            out.append(
                self.raw_to_traj(
                    raw, 1, f"uni-{start_id + i:05d}", {"source": "expert"}
                )
            )
        return Dataset(out)


class DrivingEnv:
    """Ego follows a lead vehicle toward an unmarked crosswalk; the lead
    brakes iff a (hidden) pedestrian crosses. Ego must infer the situation
    from the lead's motion: stop when it stops, keep moving otherwise."""

    name = "driving"

    def __init__(self, **overrides):
        self.T = 57
        self.cruise = 5.0  # nominal cruise speed; deliberately above the
        # retrofit speed limit of 4 used in the unseen-scenario study
        self.accel = 0.5
        self.other_brake = 1.25
        self.ego_brake = 1.0
        self.decel_onset = 35  # lead starts braking here when a pedestrian crosses
        self.react_delay = 2
        self.wrong_stop_onset = 28
        self.gap = (6.0, 10.0)
        self.init_pos = (0.0, 5.0)
        self.control_box = ControlBox((-3.0,), (3.0,))
        for k, v in overrides.items():
            if not hasattr(self, k):
                raise TypeError(f"unknown driving option {k!r}")
            setattr(self, k, v)
        self.n_agent = 2
        self.n_env = 2
        self.agent_names = ("peg", "veg")
        self.env_names = ("pot", "vot")
        self.inference_names = self.agent_names + self.env_names
        self.state_norm = SignalNorm(
            mid=(150.0, 5.5, 150.0, 5.5), halfrange=(150.0, 6.5, 150.0, 6.5)
        )

    def config(self) -> dict:
        return {
            "name": self.name,
            "T": self.T,
            "cruise": self.cruise,
            "accel": self.accel,
            "decel_onset": self.decel_onset,
            "gap": list(self.gap),
            "init_pos": list(self.init_pos),
            "control_box": [list(self.control_box.lo), list(self.control_box.hi)],
        }

    def step_np(self, x, u):
        return ego_step(x, u[0])

    def step_rows(self, x_row, u):
        p, v = x_row[0], x_row[1]
        return [p + v, v + u[0]]

    def sample_initial(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(*self.init_pos), 0.0])

    def inference_map_np(self, raw: np.ndarray) -> np.ndarray:
        return np.asarray(raw, dtype=float)

    def inference_rows(self, rows):
        return rows

    def raw_to_traj(self, raw, label, id_, meta=None) -> LabeledTrajectory:
        raw = np.asarray(raw, dtype=float)
        return LabeledTrajectory(
            id=id_,
            label=label,
            agent=raw[:, :2],
            env=raw[:, 2:],
            agent_names=self.agent_names,
            env_names=self.env_names,
            meta={"env": self.name, **(meta or {})},
        )

    # -- scripted profiles ----------------------------------------------

    def gen_env_profile(self, rng, pedestrian: bool, p0: float) -> np.ndarray:
        """Lead-vehicle trajectory (pot, vot): accelerate to cruise, then
        brake to a stop iff a pedestrian crosses."""
        cruise = self.cruise + rng.uniform(-0.25, 0.25)
        t_dec = self.decel_onset + int(rng.integers(-2, 3))
        p, v = float(p0), 0.0
        rows = [[p, v]]
        for t in range(self.T):
            if pedestrian and t >= t_dec:
                a = -min(self.other_brake, v)
            elif v < cruise:
                a = min(self.accel + rng.uniform(-0.05, 0.05), cruise - v)
            else:
                a = rng.uniform(-0.05, 0.05)
            p += v
            v = max(v + a, 0.0)
            rows.append([p, v])
        return np.array(rows)

    def _ego_profile(self, rng, brake_start) -> np.ndarray:
        """Scripted ego (peg, veg); brake_start None means keep cruising."""
        cruise = self.cruise + rng.uniform(-0.25, 0.25)
        p, v = float(rng.uniform(*self.init_pos)), 0.0
        rows = [[p, v]]
        for t in range(self.T):
            if brake_start is not None and t >= brake_start:
                a = -min(self.ego_brake, v)
            elif v < cruise:
                a = min(self.accel + rng.uniform(-0.05, 0.05), cruise - v)
            else:
                a = rng.uniform(-0.05, 0.05)
            p += v
            v = max(v + a, 0.0)
            rows.append([p, v])
        return np.array(rows)

    def _situation(self, rng, kind: str, id_: str) -> LabeledTrajectory:
        t_dec = self.decel_onset + int(rng.integers(-2, 3))
        if kind == "pos_ped":  # lead stops, ego stops behind it
            label, ped = 1, True
            brake = t_dec + self.react_delay + int(rng.integers(0, 3))
        elif kind == "pos_clear":  # nobody stops
            label, ped = 1, False
            brake = None
        elif kind == "neg_stop":  # ego stops for no reason
            label, ped = -1, False
            brake = self.wrong_stop_onset + int(rng.integers(0, 5))
        elif kind == "neg_go":  # ego ignores the stopping lead
            label, ped = -1, True
            brake = None
        else:
            raise ValueError(f"unknown situation {kind!r}")
        ego = self._ego_profile(rng, brake)
        other = self.gen_env_profile(rng, ped, p0=ego[0, 0] + rng.uniform(*self.gap))
        raw = np.concatenate([ego, other], axis=1)
        return self.raw_to_traj(raw, label, id_, {"situation": kind, "pedestrian": ped})

    SITUATIONS = ("pos_ped", "pos_clear", "neg_stop", "neg_go")

    def gen_dataset(self, n_per_situation: int, rng: np.random.Generator) -> Dataset:
        out = []
        for kind in self.SITUATIONS:
            for i in range(n_per_situation):
                out.append(self._situation(rng, kind, f"drv-{kind}-{i:05d}"))
        return Dataset(out)


def make_env(name: str, **overrides):
    envs = {"unicycle": UnicycleEnv, "driving": DrivingEnv}
    if name not in envs:
        raise ValueError(f"unknown environment {name!r}; choices: {sorted(envs)}")
    return envs[name](**overrides)


# --- closed-loop rollouts ------------------------------------------------------


def rollout_np(env, params: PolicyParams, x0, env_traj=None) -> np.ndarray:
    """Raw (T+1, n_a + n_e) closed-loop trajectory on plain numpy."""
    if env_traj is None:
        env_traj = np.zeros((env.T + 1, env.n_env))
    env_traj = np.asarray(env_traj, dtype=float)
    if env_traj.shape[0] != env.T + 1:
        raise ValueError(f"environment trajectory must have {env.T + 1} rows")
    h = zero_hidden(params)
    x = np.asarray(x0, dtype=float)
    rows = [np.concatenate([x, env_traj[0]])]
    for t in range(env.T):
        u, h = policy_step_np(params, env.state_norm.apply(rows[t]), h, env.control_box)
        x = env.step_np(x, u)
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(f"state diverged at step {t + 1}: {x}")
        rows.append(np.concatenate([x, env_traj[t + 1]]))
    return np.array(rows)


def rollout_graph(env, cell: PolicyCell, x0, env_traj=None):
    """Same closed loop on the expression graph; returns T+1 rows whose
    entries are Values wherever the policy influences them."""
    if env_traj is None:
        env_traj = np.zeros((env.T + 1, env.n_env))
    env_traj = np.asarray(env_traj, dtype=float)
    h = [0.0] * len(cell.rows)
    agent = [float(v) for v in x0]
    rows = [agent + list(env_traj[0])]
    mid, hr = env.state_norm.mid, env.state_norm.halfrange
    for t in range(env.T):
        x_in = [
            (s - m) * (1.0 / r) for s, m, r in zip(rows[t], mid, hr)
        ]
        u, h = cell.step(x_in, h)
        agent = env.step_rows(agent, u)
        rows.append(list(agent) + list(env_traj[t + 1]))
    return rows
