"""Deterministic toy environments with scripted multimodal data policies.

``PointMaze2D`` is a point mass in a 10x10 box with one rectangular obstacle
between the start region and the goal; the scripted collector passes the
obstacle on the left (+y) or on the right (-y). ``Bimodal1D`` is a 1D
integrator whose data policy pushes with a ~ +1 or a ~ -1 at every step.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .trajkit import WindowDataset, WindowShape, windows_from_episode

CONFIG_DIR = Path(__file__).with_name("configs")


@dataclass(frozen=True)
class MazeConfig:
    version: int = 1
    dt: float = 0.05
    drag: float = 0.1
    bounds: tuple = (0.0, 10.0)
    obstacle: tuple = (4.0, 2.5, 6.0, 7.5)  # xmin, ymin, xmax, ymax
    goal: tuple = (9.0, 5.0)
    goal_radius: float = 0.5
    start_center: tuple = (1.0, 5.0)
    start_half_extent: tuple = (0.5, 1.0)
    max_steps: int = 400
    horizon: int = 16
    # scripted collector
    kp: float = 1.5
    kd: float = 2.0
    waypoint_reach: float = 0.6
    waypoint_jitter: float = 0.4
    action_noise: float = 0.1
    left_waypoints: tuple = ((3.0, 8.75), (7.0, 8.75))
    right_waypoints: tuple = ((3.0, 1.25), (7.0, 1.25))


@dataclass(frozen=True)
class BimodalConfig:
    version: int = 1
    step_gain: float = 0.1
    action_noise: float = 0.05
    start_range: tuple = (-1.0, 1.0)
    episode_length: int = 32
    horizon: int = 8


@dataclass
class EpisodeLog:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminal: bool = False
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32).reshape(len(self.actions), -1)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        if not len(self.states) == len(self.actions) + 1 == len(self.rewards) + 1:
            raise ValueError("episode needs len(states) == len(actions) + 1 == len(rewards) + 1")

    def __len__(self):
        return len(self.actions)


class PointMaze2D:
    name = "pointmaze2d"
    d_s = 4
    d_a = 2

    def __init__(self, config=None):
        self.config = config or MazeConfig()
        self.goal = np.asarray(self.config.goal, dtype=np.float64)

    @property
    def shape(self):
        return WindowShape(self.config.horizon, self.d_s, self.d_a)

    def reset(self, rng):
        cx, cy = self.config.start_center
        hx, hy = self.config.start_half_extent
        pos = [cx + rng.uniform(-hx, hx), cy + rng.uniform(-hy, hy)]
        return np.array(pos + [0.0, 0.0], dtype=np.float32)

    def _obstacle_contact(self, p_prev, p_new, v_new):
        xmin, ymin, xmax, ymax = self.config.obstacle
        x, y = p_new
        if not (xmin < x < xmax and ymin < y < ymax):
            return p_new, v_new
        # the face crossed last is the one hit: largest entry fraction along the segment
        d = p_new - p_prev
        candidates = []
        if p_prev[0] <= xmin and d[0] > 0:
            candidates.append(((xmin - p_prev[0]) / d[0], 0, xmin))
        if p_prev[0] >= xmax and d[0] < 0:
            candidates.append(((xmax - p_prev[0]) / d[0], 0, xmax))
        if p_prev[1] <= ymin and d[1] > 0:
            candidates.append(((ymin - p_prev[1]) / d[1], 1, ymin))
        if p_prev[1] >= ymax and d[1] < 0:
            candidates.append(((ymax - p_prev[1]) / d[1], 1, ymax))
        if not candidates:
            # started inside (should not happen): push out through the nearest face
            gaps = [(x - xmin, 0, xmin), (xmax - x, 0, xmax), (y - ymin, 1, ymin), (ymax - y, 1, ymax)]
            _, axis, value = min(gaps)
        else:
            _, axis, value = max(candidates)
        p_new = p_new.copy()
        v_new = v_new.copy()
        p_new[axis] = value
        v_new[axis] = 0.0
        return p_new, v_new

    def step(self, state, action):
        """Velocity Verlet with linear drag, inelastic walls and obstacle."""
        cfg = self.config
        s = np.asarray(state, dtype=np.float64)
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        p, v = s[:2], s[2:]
        dt, k = cfg.dt, cfg.drag
        acc = a - k * v
        p_new = p + v * dt + 0.5 * acc * dt * dt
        # implicit in v_new because drag depends on it
        v_new = (v + dt * a - 0.5 * dt * k * v) / (1.0 + 0.5 * dt * k)
        lo, hi = cfg.bounds
        for axis in range(2):
            if p_new[axis] < lo or p_new[axis] > hi:
                p_new[axis] = min(max(p_new[axis], lo), hi)
                v_new[axis] = 0.0
        p_new, v_new = self._obstacle_contact(p, p_new, v_new)
        nxt = np.concatenate([p_new, v_new]).astype(np.float32)
        return nxt, self.reward(nxt)

    def reward(self, state):
        return -float(np.linalg.norm(np.asarray(state[:2], dtype=np.float64) - self.goal))

    def at_goal(self, state):
        return -self.reward(state) <= self.config.goal_radius

    def success(self, episode):
        return self.at_goal(episode.states[-1])

    def homotopy(self, episode):
        """'left' if the path passes above the obstacle centre, 'right' otherwise."""
        xmin, ymin, xmax, ymax = self.config.obstacle
        pos = episode.states[:, :2]
        inside = (pos[:, 0] >= xmin) & (pos[:, 0] <= xmax)
        if not inside.any():
            return None
        return "left" if pos[inside, 1].mean() > 0.5 * (ymin + ymax) else "right"

    def scripted_episode(self, mode, rng):
        cfg = self.config
        pts = cfg.left_waypoints if mode == "left" else cfg.right_waypoints
        jitter = rng.uniform(-cfg.waypoint_jitter, cfg.waypoint_jitter, size=(len(pts), 2))
        waypoints = [np.asarray(w) + j for w, j in zip(pts, jitter)] + [self.goal]
        s = self.reset(rng)
        states, actions, rewards = [s], [], []
        wi = 0
        for _ in range(cfg.max_steps):
            target = waypoints[wi]
            if wi < len(waypoints) - 1 and np.linalg.norm(s[:2] - target) < cfg.waypoint_reach:
                wi += 1
                target = waypoints[wi]
            a = cfg.kp * (target - s[:2]) - cfg.kd * s[2:]
            a = np.clip(a + rng.normal(0.0, cfg.action_noise, size=2), -1.0, 1.0)
            s, r = self.step(s, a)
            states.append(s)
            actions.append(a)
            rewards.append(r)
            if self.at_goal(s):
                break
        ep = EpisodeLog(states, actions, rewards, terminal=self.at_goal(s))
        ep.info["mode"] = mode
        return ep


class Bimodal1D:
    name = "bimodal1d"
    d_s = 1
    d_a = 1

    def __init__(self, config=None):
        self.config = config or BimodalConfig()

    @property
    def shape(self):
        return WindowShape(self.config.horizon, self.d_s, self.d_a)

    def reset(self, rng):
        lo, hi = self.config.start_range
        return np.array([rng.uniform(lo, hi)], dtype=np.float32)

    def step(self, state, action):
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(1), -1.0, 1.0)
        nxt = np.asarray(state, dtype=np.float64) + self.config.step_gain * a
        return nxt.astype(np.float32), 0.0

    def success(self, episode):
        return True

    def scripted_episode(self, mode, rng):
        cfg = self.config
        s = self.reset(rng)
        states, actions, rewards = [s], [], []
        for _ in range(cfg.episode_length):
            a = rng.choice([-1.0, 1.0]) + rng.normal(0.0, cfg.action_noise)
            # the data policy's own actions are stored unclipped; step() clips
            s, r = self.step(s, a)
            states.append(s)
            actions.append([a])
            rewards.append(r)
        return EpisodeLog(states, actions, rewards, terminal=False, info={"mode": mode})


ENVS = {PointMaze2D.name: PointMaze2D, Bimodal1D.name: Bimodal1D}
DEFAULT_POLICY_MIX = {
    PointMaze2D.name: {"left": 0.5, "right": 0.5},
    Bimodal1D.name: {"bimodal": 1.0},
}
_CONFIG_TYPES = {PointMaze2D.name: MazeConfig, Bimodal1D.name: BimodalConfig}


def load_env_config(name, path=None):
    """Read a versioned JSON config; fields missing from the file keep defaults."""
    if name not in ENVS:
        raise ConfigError(f"unknown env {name!r}; valid: {sorted(ENVS)}")
    cls = _CONFIG_TYPES[name]
    path = Path(path) if path else CONFIG_DIR / f"{name}.json"
    raw = json.loads(path.read_text())
    default = cls()
    if raw.get("version", default.version) != default.version:
        raise ConfigError(f"{path}: config version {raw.get('version')} != {default.version}")
    unknown = set(raw) - set(asdict(default))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")

    def _tuplify(v):
        return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v

    return cls(**{k: _tuplify(v) for k, v in raw.items()})


def make_env(name, config=None):
    if name not in ENVS:
        raise ConfigError(f"unknown env {name!r}; valid: {sorted(ENVS)}")
    if config is None:
        config = load_env_config(name)
    return ENVS[name](config)


def step(env, state, action):
    return env.step(state, action)


def success(env, episode):
    return env.success(episode)


def collect_episodes(env, policy_mix, episodes, seed):
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    modes = sorted(policy_mix)
    probs = np.array([policy_mix[m] for m in modes], dtype=np.float64)
    probs /= probs.sum()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(episodes):
        mode = modes[rng.choice(len(modes), p=probs)]
        out.append(env.scripted_episode(mode, rng))
    return out


def collect_dataset(env, policy_mix=None, episodes=100, seed=0, return_episodes=False):
    """Roll out the scripted mix and cut stride-1 windows of the env's horizon."""
    policy_mix = policy_mix or DEFAULT_POLICY_MIX[env.name]
    eps = collect_episodes(env, policy_mix, episodes, seed)
    shape = env.shape
    wins, rews = [], []
    for ep in eps:
        w, r = windows_from_episode(ep.states, ep.actions, shape.H, ep.rewards)
        if w is not None:
            wins.append(w)
            rews.append(r)
    windows = np.concatenate(wins) if wins else np.zeros((0, shape.H, shape.D), np.float32)
    rewards = np.concatenate(rews) if rews else np.zeros((0, shape.H), np.float32)
    counts = {m: sum(ep.info.get("mode") == m for ep in eps) for m in sorted(policy_mix)}
    manifest = {
        "env": env.name,
        "env_config": asdict(env.config),
        "seed": int(seed),
        "episodes": int(episodes),
        "collection_policy": "scripted-" + "+".join(sorted(policy_mix)),
        "policy_mix": dict(policy_mix),
        "mode_proportions": {m: c / len(eps) for m, c in counts.items()},
        "success_rate": float(np.mean([env.success(ep) for ep in eps])),
        "n_windows": int(len(windows)),
    }
    if env.name == PointMaze2D.name:
        labels = [env.homotopy(ep) for ep in eps]
        manifest["homotopy_proportions"] = {
            k: labels.count(k) / len(eps) for k in ("left", "right")}
    ds = WindowDataset(shape, windows, rewards, None, manifest)
    return (ds, eps) if return_episodes else ds
