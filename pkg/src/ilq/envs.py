"""Toy control environments, scripted experts, rollouts and metrics.

Both environments are deterministic functions of (seed, actions). State is a
plain value object; :meth:`step` never mutates its input.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

# ------------------------------------------------------------------ cartpole

CARTPOLE_CONFIG = {
    "version": 1,
    "gravity": 9.81,
    "mass_cart": 1.0,
    "mass_pole": 0.1,
    "half_length": 0.5,
    "dt": 0.02,
    "force_limit": 10.0,
    "theta_limit": 0.21,
    "x_limit": 2.4,
    "init_range": 0.05,
    "expert_kp": 40.0,
    "expert_kd": 8.0,
}


@dataclass(frozen=True)
class CartpoleState:
    x: float
    x_dot: float
    theta: float
    theta_dot: float
    t: int = 0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot])


class CartpoleBalanceEnv:
    name = "cartpole"
    obs_dim = 4
    action_dim = 1

    def __init__(self, max_steps: int = 500, config: dict | None = None):
        self.max_steps = max_steps
        self.cfg = dict(CARTPOLE_CONFIG, **(config or {}))

    def spec(self) -> dict:
        return {"name": self.name, "max_steps": self.max_steps, "config": self.cfg}

    def reset(self, seed: int) -> CartpoleState:
        r = self.cfg["init_range"]
        x, xd, th, thd = np.random.default_rng(seed).uniform(-r, r, size=4)
        return CartpoleState(float(x), float(xd), float(th), float(thd))

    def observe(self, state: CartpoleState) -> np.ndarray:
        return np.array([state.x, state.x_dot, state.theta, state.theta_dot], dtype=np.float32)

    def clip_action(self, action) -> np.ndarray:
        lim = self.cfg["force_limit"]
        return np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[:1], -lim, lim)

    def step(self, state: CartpoleState, action):
        c = self.cfg
        force = float(self.clip_action(action)[0])
        g, mc, mp, l = c["gravity"], c["mass_cart"], c["mass_pole"], c["half_length"]
        total = mc + mp
        sin, cos = math.sin(state.theta), math.cos(state.theta)
        temp = (force + mp * l * state.theta_dot**2 * sin) / total
        theta_acc = (g * sin - cos * temp) / (l * (4.0 / 3.0 - mp * cos * cos / total))
        x_acc = temp - mp * l * theta_acc * cos / total
        # semi-implicit Euler: velocities first, positions from new velocities
        dt = c["dt"]
        x_dot = state.x_dot + dt * x_acc
        x = state.x + dt * x_dot
        theta_dot = state.theta_dot + dt * theta_acc
        theta = state.theta + dt * theta_dot
        nxt = CartpoleState(x, x_dot, theta, theta_dot, state.t + 1)
        fell = abs(theta) > c["theta_limit"] or abs(x) > c["x_limit"]
        done = fell or nxt.t >= self.max_steps
        return nxt, 1.0, done, {"fell": fell, "collision": 0}

    def is_success(self, state: CartpoleState, info: dict, collisions: int) -> bool:
        return state.t >= self.max_steps and not info.get("fell", False)

    def expert_action(self, state: CartpoleState) -> np.ndarray:
        c = self.cfg
        f = c["expert_kp"] * state.theta + c["expert_kd"] * state.theta_dot
        return self.clip_action([f])


# ---------------------------------------------------------------- grid drive

GRID_CONFIG = {
    "version": 1,
    "grid_size": 16,
    "segment_lengths": (10, 14),
    "n_segments": 4,
    "max_speed": 1.0,
    "accel": 0.25,
    "max_turn": 0.5,
    "waypoint_radius": 1.0,
    "n_crossers_per_segment": 1,
    "crosser_span": 5.0,
    "crosser_speed": (0.25, 0.45),
    "n_static": 6,
    "road_value": 0.25,
    "obstacle_value": 1.0,
    "steps_per_segment": 50,
    "collision_penalty": 10.0,
    "steer_penalty": 0.01,
    "expert_lookahead": 2.0,
    "expert_steer_gain": 2.0,
    "expert_brake_ahead": 5.0,
    "expert_brake_lateral": 2.5,
}


@dataclass(frozen=True)
class Crosser:
    x: float
    y: float
    vx: float
    vy: float
    x0: float
    y0: float
    span: float
    lane_s: float = 0.0


@dataclass(frozen=True)
class GridDriveState:
    x: float
    y: float
    heading: float
    speed: float
    target: int
    crossers: tuple[Crosser, ...]
    statics: tuple[tuple[int, int], ...]
    waypoints: tuple[tuple[float, float], ...]
    collisions: int = 0
    t: int = 0

    def agent_cell(self) -> tuple[int, int]:
        return (math.floor(self.x), math.floor(self.y))

    def obstacle_cells(self) -> set[tuple[int, int]]:
        cells = {(math.floor(c.x), math.floor(c.y)) for c in self.crossers}
        cells.update(self.statics)
        return cells

    def as_dict(self) -> dict:
        return {
            "x": self.x,
            "y": self.y,
            "heading": self.heading,
            "speed": self.speed,
            "target": self.target,
            "collisions": self.collisions,
            "obstacle_cells": sorted([list(c) for c in self.obstacle_cells()]),
        }


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


class GridDriveEnv:
    """Drive a Manhattan route of waypoints past crossing traffic.

    Observation: a 16x16 world-aligned occupancy grid centred on the agent's
    cell (road 0.25, obstacle 1.0, else 0) followed by four kinematic scalars
    ``[speed, sin(heading error), cos(heading error), cross-track error / 4]``.
    Actions are ``(steer, throttle)`` in ``[-1, 1]^2``.
    """

    name = "griddrive"
    action_dim = 2

    def __init__(self, long_horizon: bool = False, max_steps: int | None = None, config: dict | None = None):
        self.cfg = dict(GRID_CONFIG, **(config or {}))
        self.long_horizon = long_horizon
        self.n_segments = self.cfg["n_segments"] * (2 if long_horizon else 1)
        self.max_steps = max_steps if max_steps is not None else self.cfg["steps_per_segment"] * self.n_segments
        g = self.cfg["grid_size"]
        self.grid_shape = (g, g)
        self.obs_dim = g * g + 4

    def spec(self) -> dict:
        return {"name": self.name, "long_horizon": self.long_horizon, "max_steps": self.max_steps,
                "config": {k: list(v) if isinstance(v, tuple) else v for k, v in self.cfg.items()}}

    # -- construction --------------------------------------------------------

    def reset(self, seed: int) -> GridDriveState:
        c = self.cfg
        rng = np.random.default_rng(seed)
        pts = [(0.5, 0.5)]
        direction = 0  # 0 = east, 1 = north
        crossers = []
        road: set[tuple[int, int]] = set()
        route_s = 0.0
        for _ in range(self.n_segments):
            length = int(rng.integers(c["segment_lengths"][0], c["segment_lengths"][1] + 1))
            x0, y0 = pts[-1]
            dx, dy = (1.0, 0.0) if direction == 0 else (0.0, 1.0)
            for k in range(length + 1):
                road.add((math.floor(x0 + dx * k), math.floor(y0 + dy * k)))
            pts.append((x0 + dx * length, y0 + dy * length))
            for _ in range(c["n_crossers_per_segment"]):
                along = float(rng.uniform(5.0, length - 2.0))
                cx, cy = x0 + dx * along, y0 + dy * along
                speed = float(rng.uniform(*c["crosser_speed"]))
                offset = float(rng.uniform(-c["crosser_span"], c["crosser_span"]))
                sign = 1.0 if rng.random() < 0.5 else -1.0
                # crossers move perpendicular to the segment
                px, py = -dy, dx
                crossers.append(Crosser(cx + px * offset, cy + py * offset, sign * px * speed, sign * py * speed,
                                        cx, cy, c["crosser_span"], route_s + along))
            route_s += length
            direction = 1 - direction if rng.random() < 0.7 else direction
        statics = []
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        lo_x, hi_x, lo_y, hi_y = min(xs) - 6, max(xs) + 6, min(ys) - 6, max(ys) + 6
        while len(statics) < c["n_static"]:
            cell = (int(rng.integers(lo_x, hi_x)), int(rng.integers(lo_y, hi_y)))
            # statics stay at least two cells from the road
            if all(abs(cell[0] - r[0]) + abs(cell[1] - r[1]) > 2 for r in road) and cell not in statics:
                statics.append(cell)
        return GridDriveState(0.5, 0.5, 0.0 if pts[1][0] > pts[0][0] else math.pi / 2, 0.0, 1,
                              tuple(crossers), tuple(statics), tuple(pts))

    # -- observation ---------------------------------------------------------

    def road_cells(self, state: GridDriveState) -> set[tuple[int, int]]:
        cells = set()
        for (x0, y0), (x1, y1) in zip(state.waypoints[:-1], state.waypoints[1:]):
            n = int(round(abs(x1 - x0) + abs(y1 - y0)))
            for k in range(n + 1):
                f = k / max(n, 1)
                cells.add((math.floor(x0 + (x1 - x0) * f), math.floor(y0 + (y1 - y0) * f)))
        return cells

    def grid(self, state: GridDriveState) -> np.ndarray:
        g = self.cfg["grid_size"]
        half = g // 2
        ax, ay = state.agent_cell()
        out = np.zeros((g, g), dtype=np.float32)
        # row i <-> y offset (half-1-i), col j <-> x offset (j-half): north is up
        for cx, cy in self._road_cache(state):
            i, j = half - 1 - (cy - ay), cx - ax + half
            if 0 <= i < g and 0 <= j < g:
                out[i, j] = self.cfg["road_value"]
        for cx, cy in state.obstacle_cells():
            i, j = half - 1 - (cy - ay), cx - ax + half
            if 0 <= i < g and 0 <= j < g:
                out[i, j] = self.cfg["obstacle_value"]
        return out

    def _road_cache(self, state: GridDriveState):
        key = state.waypoints
        cache = getattr(self, "_road", None)
        if cache is None or cache[0] != key:
            self._road = (key, frozenset(self.road_cells(state)))
        return self._road[1]

    def scalars(self, state: GridDriveState) -> np.ndarray:
        tx, ty = state.waypoints[state.target]
        px, py = state.waypoints[state.target - 1]
        err = _wrap_angle(self._pursuit_heading(state) - state.heading)
        seg = np.array([tx - px, ty - py])
        seg /= max(np.linalg.norm(seg), 1e-9)
        cross = seg[0] * (state.y - py) - seg[1] * (state.x - px)
        return np.array([state.speed, math.sin(err), math.cos(err), np.clip(cross / 4.0, -1, 1)], dtype=np.float32)

    def observe(self, state: GridDriveState) -> np.ndarray:
        return np.concatenate([self.grid(state).reshape(-1), self.scalars(state)]).astype(np.float32)

    def split_obs(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = self.cfg["grid_size"]
        obs = np.asarray(obs)
        return obs[..., : g * g].reshape(obs.shape[:-1] + (g, g)), obs[..., g * g :]

    # -- dynamics ------------------------------------------------------------

    def clip_action(self, action) -> np.ndarray:
        return np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[:2], -1.0, 1.0)

    def _pursuit_heading(self, state: GridDriveState) -> float:
        tx, ty = state.waypoints[state.target]
        px, py = state.waypoints[state.target - 1]
        seg = np.array([tx - px, ty - py])
        length = max(np.linalg.norm(seg), 1e-9)
        seg /= length
        along = float(np.dot([state.x - px, state.y - py], seg))
        la = min(along + self.cfg["expert_lookahead"], length)
        gx, gy = px + seg[0] * la, py + seg[1] * la
        return math.atan2(gy - state.y, gx - state.x)

    def route_position(self, state: GridDriveState) -> float:
        """Arc length along the route of the agent's projection on its current segment."""
        wps = state.waypoints
        done = 0.0
        for a, b in zip(wps[: state.target - 1], wps[1 : state.target]):
            done += math.dist(a, b)
        (px, py), (tx, ty) = wps[state.target - 1], wps[state.target]
        length = max(math.dist((px, py), (tx, ty)), 1e-9)
        along = ((state.x - px) * (tx - px) + (state.y - py) * (ty - py)) / length
        return done + min(max(along, 0.0), length)

    def step(self, state: GridDriveState, action):
        c = self.cfg
        steer, throttle = (float(v) for v in self.clip_action(action))
        heading = _wrap_angle(state.heading + c["max_turn"] * steer)
        speed = float(np.clip(state.speed + c["accel"] * throttle, 0.0, c["max_speed"]))
        x = state.x + speed * math.cos(heading)
        y = state.y + speed * math.sin(heading)
        crossers = []
        for cr in state.crossers:
            nx, ny, vx, vy = cr.x + cr.vx, cr.y + cr.vy, cr.vx, cr.vy
            if math.hypot(nx - cr.x0, ny - cr.y0) > cr.span:
                vx, vy = -vx, -vy
                nx, ny = cr.x + vx, cr.y + vy
            crossers.append(replace(cr, x=nx, y=ny, vx=vx, vy=vy))
        target = state.target
        prev_d = math.dist((state.x, state.y), state.waypoints[target])
        new_d = math.dist((x, y), state.waypoints[target])
        progress = prev_d - new_d
        reached_final = False
        if new_d <= c["waypoint_radius"]:
            if target == len(state.waypoints) - 1:
                reached_final = True
            else:
                target += 1
        nxt = GridDriveState(x, y, heading, speed, target, tuple(crossers), state.statics, state.waypoints,
                             state.collisions, state.t + 1)
        collision = int(nxt.agent_cell() in nxt.obstacle_cells())
        nxt = replace(nxt, collisions=state.collisions + collision)
        reward = progress - c["collision_penalty"] * collision - c["steer_penalty"] * abs(steer)
        done = reached_final or nxt.t >= self.max_steps
        return nxt, float(reward), done, {"collision": collision, "reached_final": reached_final}

    def is_success(self, state: GridDriveState, info: dict, collisions: int) -> bool:
        return bool(info.get("reached_final")) and collisions == 0

    def expert_action(self, state: GridDriveState) -> np.ndarray:
        c = self.cfg
        err = _wrap_angle(self._pursuit_heading(state) - state.heading)
        steer = float(np.clip(c["expert_steer_gain"] * err, -1.0, 1.0))
        v = state.speed
        stop_dist = v * v / (2.0 * c["accel"]) + 0.5 * v
        agent_s = self.route_position(state)
        blocked = False
        for cr in state.crossers:
            ahead = cr.lane_s - agent_s
            if ahead <= stop_dist + 1.0 or ahead > c["expert_brake_ahead"]:
                # too close to stop short of the lane (commit) or too far to matter
                continue
            # position only, so the rule is recoverable from the occupancy grid
            if math.hypot(cr.x - cr.x0, cr.y - cr.y0) <= c["expert_brake_lateral"]:
                blocked = True
        throttle = -1.0 if blocked else 1.0
        return np.array([steer, throttle])


# ------------------------------------------------------------------ registry


def make_env(name: str, **kwargs):
    if name == "cartpole":
        return CartpoleBalanceEnv(**kwargs)
    if name == "griddrive":
        return GridDriveEnv(**kwargs)
    if name == "griddrive-long":
        return GridDriveEnv(long_horizon=True, **kwargs)
    raise ConfigError(f"unknown environment {name!r}")


def env_id(env) -> str:
    if isinstance(env, GridDriveEnv) and env.long_horizon:
        return "griddrive-long"
    return env.name


# ---------------------------------------------------------------- rollouts


@dataclass
class Step:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    done: bool
    state: dict | None = None
    collision: int = 0


@dataclass
class Trajectory:
    seed: int
    env: str
    policy_id: str
    steps: list[Step] = field(default_factory=list)
    success: bool = False
    collisions: int = 0
    source: str = "expert"
    final_state: dict | None = None

    @property
    def ret(self) -> float:
        total = 0.0
        for s in self.steps:
            total += s.reward
        return total

    def __len__(self) -> int:
        return len(self.steps)

    def to_json(self) -> dict:
        steps = []
        for s in self.steps:
            d = {"obs": [float(v) for v in s.obs], "action": [float(v) for v in s.action],
                 "reward": float(s.reward), "done": bool(s.done)}
            if s.state is not None:
                d["state"] = s.state
                d["collision"] = int(s.collision)
            steps.append(d)
        out = {"seed": self.seed, "env": self.env, "policy_id": self.policy_id, "source": self.source,
               "steps": steps, "return": self.ret, "success": bool(self.success),
               "collisions": int(self.collisions)}
        if self.final_state is not None:
            out["final_state"] = self.final_state
        return out

    @classmethod
    def from_json(cls, d: dict) -> Trajectory:
        steps = [Step(np.asarray(s["obs"], dtype=np.float32), np.asarray(s["action"], dtype=np.float32),
                      float(s["reward"]), bool(s["done"]), s.get("state"), int(s.get("collision", 0)))
                 for s in d["steps"]]
        return cls(d["seed"], d["env"], d["policy_id"], steps, bool(d["success"]), int(d["collisions"]),
                   d.get("source", "expert"), d.get("final_state"))


Actor = Callable[[object, np.ndarray], np.ndarray]


def rollout(policy, env, seed: int, max_steps: int | None = None, deterministic: bool = True,
            record_state: bool = False, policy_id: str = "policy", source: str = "fp_policy") -> Trajectory:
    """Run one episode.

    ``policy`` is either a :class:`GaussianPolicy` or the string ``"expert"``
    for the scripted controller. Stochastic actions draw from an rng seeded
    by the episode seed, so (policy, seed) fixes every byte.
    """
    horizon = env.max_steps if max_steps is None else min(max_steps, env.max_steps)
    is_expert = isinstance(policy, str) and policy == "expert"
    if not is_expert and policy.obs_dim != env.obs_dim:
        raise ShapeError(f"policy expects {policy.obs_dim} inputs, {env.name} observations have {env.obs_dim}")
    rng = np.random.default_rng([seed, 7])
    traj = Trajectory(seed, env_id(env), "expert" if is_expert else policy_id,
                      source="expert" if is_expert else source)
    state = env.reset(seed)
    info: dict = {}
    for _ in range(horizon):
        obs = env.observe(state)
        if is_expert:
            action = env.expert_action(state).astype(np.float32)
        else:
            action = policy.act(obs, rng, deterministic)
        nxt, reward, done, info = env.step(state, action)
        traj.steps.append(Step(obs, np.asarray(action, dtype=np.float32), reward, done,
                               state.as_dict() if record_state and hasattr(state, "as_dict") else None,
                               info.get("collision", 0)))
        traj.collisions += info.get("collision", 0)
        state = nxt
        if done:
            break
    if record_state and hasattr(state, "as_dict"):
        traj.final_state = state.as_dict()
    traj.success = bool(traj.steps) and env.is_success(state, info, traj.collisions)
    return traj


@dataclass
class Metrics:
    avg_return: float
    return_std: float
    success_rate: float
    collisions_per_episode: float
    episodes: int

    def to_dict(self) -> dict:
        return {"avg_return": self.avg_return, "return_std": self.return_std, "success_rate": self.success_rate,
                "collisions_per_episode": self.collisions_per_episode, "episodes": self.episodes}


def metrics_from(trajs: Sequence[Trajectory]) -> Metrics:
    trajs = sorted(trajs, key=lambda t: t.seed)
    returns = np.array([t.ret for t in trajs], dtype=np.float64)
    successes = sum(1 for t in trajs if t.success)
    collisions = sum(t.collisions for t in trajs)
    n = len(trajs)
    return Metrics(float(returns.mean()), float(returns.std()), successes / n, collisions / n, n)


def evaluate(policy, env, n_episodes: int, base_seed: int, deterministic: bool = True,
             workers: int = 1) -> Metrics:
    """Aggregate metrics over episodes seeded ``base_seed + index``."""
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    seeds = [base_seed + i for i in range(n_episodes)]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            trajs = list(pool.map(lambda s: rollout(policy, env, s, deterministic=deterministic), seeds))
    else:
        trajs = [rollout(policy, env, s, deterministic=deterministic) for s in seeds]
    return metrics_from(trajs)


# -------------------------------------------------------- JSONL persistence


def save_trajectories(trajs: Iterable[Trajectory], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajs:
            fh.write(json.dumps(t.to_json(), separators=(",", ":")) + "\n")


def load_trajectories(path) -> list[Trajectory]:
    with open(Path(path), encoding="utf-8") as fh:
        return [Trajectory.from_json(json.loads(line)) for line in fh if line.strip()]


def collision_scan(traj: Trajectory) -> list[int]:
    """Recompute per-step collision flags from stored post-step states."""
    states = [s.state for s in traj.steps[1:]] + [traj.final_state]
    flags = []
    for st in states:
        cell = [math.floor(st["x"]), math.floor(st["y"])]
        flags.append(int(cell in st["obstacle_cells"]))
    return flags
