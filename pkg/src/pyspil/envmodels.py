"""Stochastic dynamics, rewards and safety functions of the training environments.

Every environment exposes `h(s)` with the convention h < 0 <=> safe, so the
chance-constraint machinery never needs to know which environment it serves.
The batch functions accept numpy arrays or tape variables with one row per
trajectory.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np

from pyspil import autodiff as ad
from pyspil.errors import UsageError
from pyspil.models import EnvId, NoiseSpec, ScenarioScript

CAR_DT = 0.1
CAR_ACTION_BOUNDS = (-4.0, 3.0)
CAR_MIN_GAP = 2.0
CAR_NOISE = NoiseSpec.symmetric([0.7], width=10.0)

ROBOT_DT = 0.4
ROBOT_RATE_LIMITS = (1.8 * ROBOT_DT, 0.8 * ROBOT_DT)
ROBOT_SAFE_DISTANCE = 0.9
ROBOT_REFERENCE_SPEED = 0.3
# Desired (v, omega) range the policy can request before rate limiting.
ROBOT_ACTION_BOUNDS = ((-0.2, 0.8), (-1.2, 1.2))
# robot (xi_v, xi_omega), obstacle (xi_v, xi_omega)
ROBOT_NOISE = NoiseSpec.symmetric([0.08, 0.05, 0.1, 0.06], width=5.0)


class CarState(NamedTuple):
    v_e: float
    v_f: float
    eps: float


class RobotState(NamedTuple):
    px: float
    py: float
    alpha: float
    v: float
    omega: float


# batch dynamics


def car_transition(states, actions, noise, dt: float = CAR_DT):
    """s' = A s + B a + D xi for rows [v_e, v_f, eps]."""
    v_e, v_f, gap = states[:, 0], states[:, 1], states[:, 2]
    return ad.stack(
        [
            v_e + dt * actions[:, 0],
            v_f + dt * noise[:, 0],
            gap + dt * (v_f - v_e),
        ],
        axis=1,
    )


def car_reward(states, actions):
    a = actions[:, 0]
    return 0.2 * states[:, 0] - 0.1 * states[:, 2] - 0.02 * a * a


def car_safety(states):
    return CAR_MIN_GAP - states[:, 2]


def robot_transition(states, actions, noise, dt: float = ROBOT_DT):
    """Unicycle kinematics for rows [px, py, alpha, v, omega]."""
    px, py, alpha = states[:, 0], states[:, 1], states[:, 2]
    v, omega = states[:, 3], states[:, 4]
    return ad.stack(
        [
            px + dt * v * ad.cos(alpha),
            py + dt * v * ad.sin(alpha),
            alpha + dt * omega,
            actions[:, 0] + dt * noise[:, 0],
            actions[:, 1] + dt * noise[:, 1],
        ],
        axis=1,
    )


def robot_clamp(current_v, current_omega, requested_v, requested_omega):
    """Project requested velocities into the rate-limited window around the current ones."""
    v_limit, omega_limit = ROBOT_RATE_LIMITS
    v = ad.clip(requested_v, current_v - v_limit, current_v + v_limit)
    omega = ad.clip(requested_omega, current_omega - omega_limit, current_omega + omega_limit)
    return v, omega


def robot_reward(robot, actions):
    py, alpha, v = robot[:, 1], robot[:, 2], robot[:, 3]
    v_d, omega_d = actions[:, 0], actions[:, 1]
    speed_error = v - ROBOT_REFERENCE_SPEED
    return (
        -1.4 * py * py
        - alpha * alpha
        - 16.0 * speed_error * speed_error
        - 0.2 * v_d * v_d
        - 0.5 * omega_d * omega_d
    )


def robot_safety(robot, obstacle):
    dx = robot[:, 0] - obstacle[:, 0]
    dy = robot[:, 1] - obstacle[:, 1]
    return ROBOT_SAFE_DISTANCE - ad.sqrt(dx * dx + dy * dy)


# single-state operations


def step_car(state: CarState, action: float, noise: float) -> CarState:
    row = np.array([state], dtype=np.float64)
    return CarState(*car_transition(row, np.array([[action]]), np.array([[noise]]))[0])


def reward_car(state: CarState, action: float) -> float:
    return float(car_reward(np.array([state], dtype=np.float64), np.array([[action]]))[0])


def safety_car(state: CarState) -> float:
    return float(car_safety(np.array([state], dtype=np.float64))[0])


def step_robot(
    robot: RobotState, action: Tuple[float, float], noise: Tuple[float, float]
) -> RobotState:
    row = np.array([robot], dtype=np.float64)
    out = robot_transition(row, np.array([action], dtype=np.float64), np.array([noise], dtype=np.float64))
    return RobotState(*out[0])


def clamp_robot_action(
    current: Tuple[float, float], requested: Tuple[float, float]
) -> Tuple[float, float]:
    v, omega = robot_clamp(
        np.float64(current[0]), np.float64(current[1]), np.float64(requested[0]), np.float64(requested[1])
    )
    return float(v), float(omega)


def reward_robot(robot: RobotState, action: Tuple[float, float]) -> float:
    row = np.array([robot], dtype=np.float64)
    return float(robot_reward(row, np.array([action], dtype=np.float64))[0])


def safety_robot(robot: RobotState, obstacle: RobotState) -> float:
    return float(
        robot_safety(np.array([robot], dtype=np.float64), np.array([obstacle], dtype=np.float64))[0]
    )


def sample_noise(spec: NoiseSpec, rng: np.random.Generator, size: Tuple[int, ...] = ()) -> np.ndarray:
    """Draw truncated-normal noise of shape (*size, spec.dim) by rejection.

    Rejection is cheap for the truncations used here (at least 5 standard
    deviations), so redraws are rare.
    """
    means = np.array([c.mean for c in spec.channels])
    stds = np.array([c.std for c in spec.channels])
    lower = np.array([c.lower for c in spec.channels])
    upper = np.array([c.upper for c in spec.channels])
    shape = (*size, spec.dim)
    samples = rng.normal(means, stds, size=shape)
    outside = (samples <= lower) | (samples >= upper)
    while outside.any():
        redraw = rng.normal(means, stds, size=shape)
        samples = np.where(outside, redraw, samples)
        outside = (samples <= lower) | (samples >= upper)
    return samples


# environments


@dataclass(frozen=True)
class ModelSpec(ABC):
    """A stochastic environment: transition, reward, safety function and action bounds.

    States travel as rows of a (trajectories, state_dim) array; every batch method
    also accepts tape variables so rollouts can be replayed differentiably.
    """

    horizon: int
    gamma: float

    name: str = ""
    state_dim: int = 0
    obs_dim: int = 0
    action_dim: int = 0

    @property
    @abstractmethod
    def action_bounds(self) -> list[Tuple[float, float]]:
        pass

    @property
    @abstractmethod
    def noise(self) -> Optional[NoiseSpec]:
        pass

    @property
    def noise_dim(self) -> int:
        return self.noise.dim if self.noise is not None else 1

    @abstractmethod
    def initial_states(self, rng: np.random.Generator, count: int) -> np.ndarray:
        pass

    @abstractmethod
    def transition(self, states, actions, noise, step: int):
        pass

    @abstractmethod
    def reward(self, states, actions):
        pass

    @abstractmethod
    def safety(self, states):
        pass

    def observe(self, states):
        """Policy and critic input for each state row."""
        return states

    def act(self, policy_output, states):
        """Turn the (already squashed) policy output into the applied action."""
        return policy_output

    def sample_noise(self, rng: np.random.Generator, count: int, horizon: int) -> np.ndarray:
        if self.noise is None:
            return np.zeros((count, horizon, 1))
        return sample_noise(self.noise, rng, (count, horizon))

    @classmethod
    def from_id(cls, env_id: EnvId, **kwargs) -> "ModelSpec":
        env_id = EnvId(env_id)
        if env_id == EnvId.CAR:
            return CarFollowing(**kwargs)
        if env_id == EnvId.ROBOT:
            return RobotNavigation(**kwargs)
        return LinearToy(**kwargs)


@dataclass(frozen=True)
class CarFollowing(ModelSpec):
    horizon: int = 40
    gamma: float = 0.99
    name: str = "car"
    state_dim: int = 3
    obs_dim: int = 3
    action_dim: int = 1

    @property
    def action_bounds(self):
        return [CAR_ACTION_BOUNDS]

    @property
    def noise(self):
        return CAR_NOISE

    def initial_states(self, rng, count):
        return np.column_stack(
            [
                rng.uniform(0.0, 15.0, count),
                rng.uniform(0.0, 15.0, count),
                rng.uniform(5.0, 35.0, count),
            ]
        )

    def transition(self, states, actions, noise, step):
        return car_transition(states, actions, noise)

    def reward(self, states, actions):
        return car_reward(states, actions)

    def safety(self, states):
        return car_safety(states)


@dataclass(frozen=True)
class RobotNavigation(ModelSpec):
    """Differential-drive robot tracking the positive x axis past one moving obstacle.

    Rows hold the robot state in columns 0-4 and the obstacle state in columns 5-9.
    Without a scenario the obstacle keeps its current velocities plus noise;
    with one it follows the scripted commands plus the same noise.
    """

    horizon: int = 25
    gamma: float = 0.99
    name: str = "robot"
    state_dim: int = 10
    obs_dim: int = 9
    action_dim: int = 2
    scenario: Optional[ScenarioScript] = None

    @property
    def action_bounds(self):
        return list(ROBOT_ACTION_BOUNDS)

    @property
    def noise(self):
        return ROBOT_NOISE

    def initial_states(self, rng, count):
        robot = np.column_stack(
            [
                1.0 + rng.uniform(-0.1, 0.1, count),
                rng.uniform(-0.1, 0.1, count),
                rng.uniform(-0.05, 0.05, count),
                rng.uniform(0.25, 0.35, count),
                np.zeros(count),
            ]
        )
        if self.scenario is not None:
            obstacle = np.tile(np.asarray(self.scenario.obstacle_start, dtype=np.float64), (count, 1))
        else:
            obstacle = np.column_stack(
                [
                    rng.uniform(2.5, 4.5, count),
                    rng.uniform(-1.5, 1.5, count),
                    rng.uniform(-np.pi, np.pi, count),
                    rng.uniform(0.0, 0.4, count),
                    rng.uniform(-0.2, 0.2, count),
                ]
            )
        return np.hstack([robot, obstacle])

    def observe(self, states):
        robot, obstacle = states[:, 0:5], states[:, 5:10]
        return ad.concatenate(
            [
                robot,
                obstacle[:, 0:2] - robot[:, 0:2],
                obstacle[:, 3:4],
                obstacle[:, 2:3],
            ],
            axis=1,
        )

    def act(self, policy_output, states):
        v, omega = robot_clamp(
            states[:, 3], states[:, 4], policy_output[:, 0], policy_output[:, 1]
        )
        return ad.stack([v, omega], axis=1)

    def obstacle_command(self, obstacle, step: int):
        if self.scenario is None:
            return obstacle[:, 3:5]
        command = self.scenario.command_at(step * ROBOT_DT)
        count = ad.value_of(obstacle).shape[0]
        return np.tile([command.v, command.omega], (count, 1))

    def transition(self, states, actions, noise, step):
        robot, obstacle = states[:, 0:5], states[:, 5:10]
        next_robot = robot_transition(robot, actions, noise[:, 0:2])
        next_obstacle = robot_transition(
            obstacle, self.obstacle_command(obstacle, step), noise[:, 2:4]
        )
        return ad.concatenate([next_robot, next_obstacle], axis=1)

    def reward(self, states, actions):
        return robot_reward(states[:, 0:5], actions)

    def safety(self, states):
        return robot_safety(states[:, 0:5], states[:, 5:10])


@dataclass(frozen=True)
class LinearToy(ModelSpec):
    """Double integrator x' = x + dt v, v' = v + dt (a + xi), safe while x < x_max.

    `noise_std = 0` gives a deterministic model; `start_spread = 0` starts every
    trajectory at the origin.
    """

    horizon: int = 5
    gamma: float = 0.99
    name: str = "toy"
    state_dim: int = 2
    obs_dim: int = 2
    action_dim: int = 1
    dt: float = 0.1
    noise_std: float = 0.2
    x_max: float = 1.5
    start_spread: float = 1.0

    def __post_init__(self):
        if self.noise_std < 0:
            raise UsageError("noise_std must be non-negative")
        if self.start_spread < 0:
            raise UsageError("start_spread must be non-negative")

    @property
    def action_bounds(self):
        return [(-2.0, 2.0)]

    @property
    def noise(self):
        if self.noise_std == 0:
            return None
        return NoiseSpec.symmetric([self.noise_std], width=5.0)

    def initial_states(self, rng, count):
        spread = self.start_spread
        return rng.uniform(-spread, spread, (count, 2))

    def transition(self, states, actions, noise, step):
        x, v = states[:, 0], states[:, 1]
        return ad.stack([x + self.dt * v, v + self.dt * (actions[:, 0] + noise[:, 0])], axis=1)

    def reward(self, states, actions):
        x, v, a = states[:, 0], states[:, 1], actions[:, 0]
        return -(x * x + 0.1 * v * v + 0.01 * a * a)

    def safety(self, states):
        return states[:, 0] - self.x_max


def sample_initial_state(env: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """One initial state row drawn from the environment's start distribution."""
    return env.initial_states(rng, 1)[0]
