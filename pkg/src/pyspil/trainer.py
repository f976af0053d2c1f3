"""Model-based actor-critic training under a joint chance constraint.

One iteration: roll out M trajectories of N steps with the current policy,
estimate p_s = m / M, update the multiplier, take one critic step on the N-step
targets, then one actor step on

    (grad J + lambda grad Phi) / (1 + lambda)

where both gradients come from replaying the same batch on a tape (BPTT
through the model with the recorded noise).
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple
from warnings import warn

import numpy as np

from pyspil import autodiff as ad
from pyspil import chance, network
from pyspil.envmodels import ModelSpec
from pyspil.errors import NumericError, UsageError
from pyspil.models import (
    MultiplierConfig,
    SurrogateConfig,
    TrainerConfig,
    TrainRecord,
)
from pyspil.multiplier import MultiplierController
from pyspil.network import NetTopology, ParamVector
from pyspil.optim import GradientStep, Optimizer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrajectoryBatch:
    """M rollouts of N steps, with the noise that produced them.

    states: (M, N+1, state_dim), starting with s_0
    actions: (M, N, action_dim), the applied (bounded) actions
    rewards: (M, N), r(s_t, a_t) for t = 0..N-1
    safety: (M, N), h(s_t) for t = 1..N
    noise: (M, N, noise_dim)
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    safety: np.ndarray
    noise: np.ndarray

    @property
    def m(self) -> int:
        return self.rewards.shape[0]

    @property
    def n(self) -> int:
        return self.rewards.shape[1]

    def discounted_returns(self, gamma: float) -> np.ndarray:
        return self.rewards @ (gamma ** np.arange(self.n))


@dataclass(frozen=True)
class TrainResult:
    actor: ParamVector
    critic: ParamVector
    records: List[TrainRecord]
    converged: bool = False


@dataclass(frozen=True)
class EvaluationResult:
    returns: np.ndarray
    safe: np.ndarray

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns))

    @property
    def safe_rate(self) -> float:
        return float(np.mean(self.safe))


def network_topologies(model: ModelSpec, config: TrainerConfig) -> Tuple[NetTopology, NetTopology]:
    """Actor: obs -> squashed action. Critic: [obs, action] -> Q."""
    actor = NetTopology.mlp(
        model.obs_dim,
        config.hidden,
        model.action_dim,
        activation=config.activation,
        squash=model.action_bounds,
    )
    critic = NetTopology.mlp(
        model.obs_dim + model.action_dim, config.hidden, 1, activation=config.activation
    )
    return actor, critic


def initialize_networks(
    model: ModelSpec, config: TrainerConfig, rng: np.random.Generator
) -> Tuple[ParamVector, ParamVector]:
    actor_topology, critic_topology = network_topologies(model, config)
    actor = ParamVector.initialize(actor_topology, rng)
    critic = ParamVector.initialize(critic_topology, rng)
    if config.actor_init is not None:
        actor = ParamVector.load(config.actor_init)
        if actor.topology != actor_topology:
            raise UsageError(f"{config.actor_init} does not match the {model.name} actor layout")
    if config.actor_output_bias is not None:
        actor = actor.with_output_bias(config.actor_output_bias)
    return actor, critic


def _check_policy(policy: ParamVector, model: ModelSpec) -> None:
    topology = policy.topology
    if topology.input_size != model.obs_dim or topology.output_size != model.action_dim:
        raise UsageError(
            f"policy maps {topology.input_size} -> {topology.output_size}, "
            f"{model.name} needs {model.obs_dim} -> {model.action_dim}"
        )


def rollout(
    policy: ParamVector,
    model: ModelSpec,
    config: TrainerConfig,
    rng: np.random.Generator,
) -> TrajectoryBatch:
    """Simulate config.m trajectories of config.n steps under the policy.

    Raises:
        UsageError: policy dimensions do not match the model.
        NumericError: a state became non-finite; names the trajectory and step.
    """
    _check_policy(policy, model)
    m, n = config.m, config.n
    state = model.initial_states(rng, m)
    noise = model.sample_noise(rng, m, n)

    states = np.empty((m, n + 1, model.state_dim))
    actions = np.empty((m, n, model.action_dim))
    rewards = np.empty((m, n))
    safety = np.empty((m, n))
    states[:, 0] = state
    for t in range(n):
        action = model.act(network.forward(policy, model.observe(state)), state)
        rewards[:, t] = model.reward(state, action)
        actions[:, t] = action
        state = model.transition(state, action, noise[:, t], t)
        bad = ~np.all(np.isfinite(state), axis=1)
        if bad.any():
            trajectory = int(np.argmax(bad))
            raise NumericError(
                f"non-finite state in trajectory {trajectory} at step {t + 1}",
                trajectory=trajectory,
                step=t + 1,
            )
        states[:, t + 1] = state
        safety[:, t] = model.safety(state)
    return TrajectoryBatch(states, actions, rewards, safety, noise)


def _replay(tape: ad.Tape, theta: ad.Var, topology: NetTopology, batch: TrajectoryBatch, model: ModelSpec):
    """Re-run the batch on the tape from its recorded start states and noise."""
    state = tape.constant(batch.states[:, 0])
    rewards = []
    safety = []
    for t in range(batch.n):
        action = model.act(network.apply(theta, topology, model.observe(state)), state)
        rewards.append(model.reward(state, action))
        state = model.transition(state, action, batch.noise[:, t], t)
        safety.append(model.safety(state))
    return state, rewards, ad.stack(safety, axis=1)


def _q_value(critic_values, critic_topology, observation, action):
    return network.apply(critic_values, critic_topology, ad.concatenate([observation, action], axis=1))[:, 0]


def _terminal_q(final_state, theta, actor_topology: NetTopology, critic: ParamVector, model: ModelSpec):
    """Q(s_N, pi(s_N); w) with the critic parameters held constant."""
    observation = model.observe(final_state)
    action = model.act(network.apply(theta, actor_topology, observation), final_state)
    return _q_value(critic.values, critic.topology, observation, action)


def _n_step_objective(rewards, terminal_q, gamma: float):
    total = terminal_q * gamma ** len(rewards)
    for t, reward in enumerate(rewards):
        total = total + reward * gamma**t
    return total.mean() if isinstance(total, ad.Var) else float(np.mean(total))


def objective_J(
    batch: TrajectoryBatch,
    policy: ParamVector,
    critic: ParamVector,
    model: ModelSpec,
    gamma: float,
    *,
    tape: Optional[ad.Tape] = None,
    theta: Optional[ad.Var] = None,
) -> ad.Var:
    """Batch mean of sum_t gamma^t r_t + gamma^N Q(s_N, pi(s_N); w), recorded on a tape."""
    if tape is None:
        tape = ad.Tape()
        theta = tape.variable(policy.values)
    final_state, rewards, _ = _replay(tape, theta, policy.topology, batch, model)
    terminal = _terminal_q(final_state, theta, policy.topology, critic, model)
    return _n_step_objective(rewards, terminal, gamma)


def objective_phi(
    batch: TrajectoryBatch,
    policy: ParamVector,
    model: ModelSpec,
    surrogate: SurrogateConfig,
    *,
    tape: Optional[ad.Tape] = None,
    theta: Optional[ad.Var] = None,
) -> ad.Var:
    """Batch mean of prod_t phi(-h(s_t)), recorded on a tape."""
    if tape is None:
        tape = ad.Tape()
        theta = tape.variable(policy.values)
    _, _, safety = _replay(tape, theta, policy.topology, batch, model)
    return chance.surrogate_mean(safety, surrogate)


def critic_targets(
    batch: TrajectoryBatch,
    policy: ParamVector,
    critic: ParamVector,
    model: ModelSpec,
    gamma: float,
) -> np.ndarray:
    """N-step targets sum_t gamma^t r_t + gamma^N Q(s_N, a_N; w) with a_N = pi(s_N)."""
    final_state = batch.states[:, -1]
    terminal = _terminal_q(final_state, policy.values, policy.topology, critic, model)
    return batch.discounted_returns(gamma) + gamma**batch.n * terminal


def critic_loss(
    batch: TrajectoryBatch,
    critic: ParamVector,
    policy: ParamVector,
    model: ModelSpec,
    gamma: float,
    *,
    target_critic: Optional[ParamVector] = None,
    tape: Optional[ad.Tape] = None,
    w: Optional[ad.Var] = None,
) -> ad.Var:
    """Mean of 1/2 (Q_target - Q(s_0, a_0; w))^2; no gradient flows through the target.

    `target_critic` defaults to `critic`; it only feeds the (constant) targets.
    """
    if tape is None:
        tape = ad.Tape()
        w = tape.variable(critic.values)
    targets = critic_targets(batch, policy, target_critic or critic, model, gamma)
    start = batch.states[:, 0]
    q = _q_value(w, critic.topology, model.observe(start), batch.actions[:, 0])
    error = q - targets
    return (error * error * 0.5).mean()


def actor_gradients(
    policy: ParamVector,
    batch: TrajectoryBatch,
    critic: ParamVector,
    model: ModelSpec,
    gamma: float,
    surrogate: SurrogateConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """(grad_theta J, grad_theta Phi) from a single replay of the batch."""
    tape = ad.Tape()
    theta = tape.variable(policy.values)
    final_state, rewards, safety = _replay(tape, theta, policy.topology, batch, model)
    objective = _n_step_objective(
        rewards, _terminal_q(final_state, theta, policy.topology, critic, model), gamma
    )
    surrogate_value = chance.surrogate_mean(safety, surrogate)
    grad_j = tape.gradient(objective, theta)
    grad_phi = tape.gradient(surrogate_value, theta)
    return grad_j, grad_phi


def actor_step(
    policy: ParamVector,
    batch: TrajectoryBatch,
    lam: float,
    critic: ParamVector,
    config: TrainerConfig,
    model: ModelSpec,
    surrogate: SurrogateConfig,
    *,
    optimizer: Optional[Optimizer] = None,
    gradients: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> ParamVector:
    """theta + alpha_theta / (1 + lambda) * (grad J + lambda grad Phi).

    The optimizer weighs its own step for each gradient by 1 / (1 + lambda) and
    lambda / (1 + lambda). For the plain step this is exactly the law above; an
    adaptive optimizer normalises each gradient first, so lambda sets the safety
    term's share of the update even when grad Phi is orders of magnitude smaller
    than grad J.

    Raises:
        UsageError: lam is negative.
        NumericError: a gradient is not finite.
    """
    if lam < 0:
        raise UsageError(f"lambda must be non-negative, got {lam}")
    if gradients is None:
        gradients = actor_gradients(policy, batch, critic, model, config.gamma, surrogate)
    grad_j, grad_phi = gradients
    if not (np.all(np.isfinite(grad_j)) and np.all(np.isfinite(grad_phi))):
        raise NumericError("actor gradient is not finite")
    weights = [1.0 / (1.0 + lam), lam / (1.0 + lam)]
    optimizer = optimizer or GradientStep(config.alpha_theta)
    return policy.with_values(optimizer.blend(policy.values, [grad_j, grad_phi], weights))


def critic_step(
    critic: ParamVector,
    batch: TrajectoryBatch,
    policy: ParamVector,
    config: TrainerConfig,
    model: ModelSpec,
    *,
    optimizer: Optional[Optimizer] = None,
) -> ParamVector:
    tape = ad.Tape()
    w = tape.variable(critic.values)
    grad = tape.gradient(critic_loss(batch, critic, policy, model, config.gamma, tape=tape, w=w), w)
    if not np.all(np.isfinite(grad)):
        raise NumericError("critic gradient is not finite")
    optimizer = optimizer or GradientStep(config.alpha_omega)
    return critic.with_values(optimizer.descend(critic.values, grad))


IterationCallback = Callable[[int, ParamVector, ParamVector, TrainRecord], None]


def train(
    env: ModelSpec,
    trainer_config: TrainerConfig,
    multiplier_config: MultiplierConfig,
    surrogate_config: SurrogateConfig,
    *,
    on_iteration: Optional[IterationCallback] = None,
) -> TrainResult:
    """Run the constrained actor-critic loop until convergence or max_iters.

    Fully determined by trainer_config.seed. `on_iteration` is called after each
    iteration with (k, actor, critic, record), e.g. to write checkpoints.

    Raises:
        NumericError: tagged with the iteration index it occurred in.
    """
    config = trainer_config
    rng = np.random.default_rng(config.seed)
    actor, critic = initialize_networks(env, config, rng)
    controller = MultiplierController(multiplier_config)
    actor_optimizer = Optimizer.create(config.optimizer, config.alpha_theta)
    critic_optimizer = Optimizer.create(config.optimizer, config.alpha_omega)

    records: List[TrainRecord] = []
    converged = False
    started = time.perf_counter()
    for k in range(config.max_iters):
        try:
            batch = rollout(actor, env, config, rng)
            p_s = chance.estimate_safe_prob(batch.safety)
            state = controller.step(p_s)

            new_critic = critic_step(critic, batch, actor, config, env, optimizer=critic_optimizer)
            gradients = actor_gradients(actor, batch, new_critic, env, config.gamma, surrogate_config)
            new_actor = actor_step(
                actor,
                batch,
                state.lam,
                new_critic,
                config,
                env,
                surrogate_config,
                optimizer=actor_optimizer,
                gradients=gradients,
            )
        except NumericError as e:
            raise e.at_iteration(k) from e

        record = TrainRecord(
            iteration=k,
            J=float(np.mean(batch.discounted_returns(config.gamma))),
            p_s=p_s,
            delta=state.delta_err,
            integral=state.integral,
            lam=state.lam,
            grad_J_norm=float(np.linalg.norm(gradients[0])),
            grad_Phi_norm=float(np.linalg.norm(gradients[1])),
            wallclock_s=time.perf_counter() - started if config.record_wallclock else 0.0,
        )
        records.append(record)
        if k % config.log_interval == 0:
            logger.info(
                "iter %d: J=%.4f p_s=%.4f lambda=%.4f I=%.4f", k, record.J, p_s, state.lam, state.integral
            )
        logger.debug("iter %d: |grad J|=%.3e |grad Phi|=%.3e", k, record.grad_J_norm, record.grad_Phi_norm)

        actor_change = np.max(np.abs(new_actor.values - actor.values))
        critic_change = np.max(np.abs(new_critic.values - critic.values))
        actor, critic = new_actor, new_critic
        if on_iteration is not None:
            on_iteration(k, actor, critic, record)
        if actor_change <= config.zeta and critic_change <= config.zeta:
            converged = True
            logger.info("converged after %d iterations", k + 1)
            break

    if config.max_iters > 0 and not converged:
        warn(f"Stopped after {config.max_iters} iterations without reaching zeta={config.zeta}")
    return TrainResult(actor, critic, records, converged)


def evaluate(
    policy: ParamVector,
    model: ModelSpec,
    episodes: int,
    seed: int,
    horizon: Optional[int] = None,
    gamma: Optional[float] = None,
) -> EvaluationResult:
    """Fresh rollouts without learning: discounted returns and joint safety per episode."""
    config = TrainerConfig(m=episodes, n=horizon or model.horizon, gamma=gamma or model.gamma)
    batch = rollout(policy, model, config, np.random.default_rng(seed))
    return EvaluationResult(
        returns=batch.discounted_returns(config.gamma),
        safe=np.all(batch.safety < 0, axis=1),
    )
