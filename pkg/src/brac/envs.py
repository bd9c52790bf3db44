"""Small deterministic continuous-control environments.

Both tasks have deterministic dynamics, seeded resets, fixed horizons, and
rewards that are never positive, which makes learned-vs-behavior comparisons
unambiguous. The dynamics are exposed both as stateful step() and as pure
batch functions so evaluation can run many episodes in lockstep.
"""

import numpy as np

from .errors import ConfigError


class Environment:
    """Base class: fixed-horizon box-action task with seeded resets."""

    name = "env"
    state_dim = 0
    action_dim = 0
    horizon = 0
    action_low = None
    action_high = None

    def __init__(self):
        self._t = 0

    def reset(self, seed):
        """Reproducible initial state for an integer seed."""
        self._t = 0
        return self._initial_state(np.random.default_rng(seed))

    def step(self, state, action):
        """Advance one step; returns (next_state, reward, done).

        Out-of-range actions are clipped. done fires at the horizon.
        """
        action = np.clip(np.asarray(action, dtype=np.float64),
                         self.action_low, self.action_high)
        nxt, reward = self.dynamics_batch(np.asarray(state, dtype=np.float64)[None],
                                          action[None])
        self._t += 1
        return nxt[0], float(reward[0]), self._t >= self.horizon

    def reset_batch(self, seeds):
        self._t = 0
        return np.stack([self._initial_state(np.random.default_rng(s))
                         for s in seeds])

    def _initial_state(self, rng):
        raise NotImplementedError

    def dynamics_batch(self, states, actions):
        """Pure vectorized dynamics: (next_states, rewards)."""
        raise NotImplementedError


class PointMass2D(Environment):
    """Force-controlled point mass homing on a fixed goal.

    State (px, py, vx, vy); action = force in [-1, 1]^2. Velocity integrates
    clipped force, position integrates velocity, both with dt = 0.1. Reward
    is -(distance to goal) - 0.01 |a|^2, so 0 exactly at the goal at rest.
    """

    name = "pointmass2d"
    state_dim = 4
    action_dim = 2
    horizon = 100
    action_low = np.array([-1.0, -1.0])
    action_high = np.array([1.0, 1.0])
    goal = np.array([0.5, 0.5])
    start_low = np.array([-1.0, -1.0])
    start_high = np.array([-0.5, -0.5])

    def _initial_state(self, rng):
        pos = rng.uniform(self.start_low, self.start_high)
        return np.concatenate([pos, np.zeros(2)])

    def dynamics_batch(self, states, actions):
        pos, vel = states[:, :2], states[:, 2:]
        vel = np.clip(vel + 0.1 * actions, -1.0, 1.0)
        pos = pos + 0.1 * vel
        reward = -np.linalg.norm(pos - self.goal, axis=1) \
            - 0.01 * np.sum(actions * actions, axis=1)
        return np.concatenate([pos, vel], axis=1), reward


class PendulumSwingup(Environment):
    """Torque-limited rigid pendulum; angle 0 is upright.

    State (cos th, sin th, th_dot); torque in [-2, 2]; semi-implicit Euler
    with dt = 0.05, g = 10, m = l = 1; angular speed clipped to +-8.
    Reward is -(angle^2 + 0.1 th_dot^2 + 0.001 a^2) with the angle wrapped
    to [-pi, pi].
    """

    name = "pendulum"
    state_dim = 3
    action_dim = 1
    horizon = 200
    action_low = np.array([-2.0])
    action_high = np.array([2.0])
    dt = 0.05
    max_speed = 8.0

    def _initial_state(self, rng):
        theta = rng.uniform(-np.pi, np.pi)
        theta_dot = rng.uniform(-1.0, 1.0)
        return np.array([np.cos(theta), np.sin(theta), theta_dot])

    def dynamics_batch(self, states, actions):
        cos_t, sin_t, td = states[:, 0], states[:, 1], states[:, 2]
        theta = np.arctan2(sin_t, cos_t)
        u = actions[:, 0]
        angle = ((theta + np.pi) % (2.0 * np.pi)) - np.pi
        reward = -(angle * angle + 0.1 * td * td + 0.001 * u * u)
        new_td = np.clip(td + (15.0 * sin_t + 3.0 * u) * self.dt,
                         -self.max_speed, self.max_speed)
        new_theta = theta + new_td * self.dt
        nxt = np.stack([np.cos(new_theta), np.sin(new_theta), new_td], axis=1)
        return nxt, reward


_ENVS = {PointMass2D.name: PointMass2D, PendulumSwingup.name: PendulumSwingup}


def make_env(name):
    if name not in _ENVS:
        raise ConfigError(f"unknown environment '{name}' (have {sorted(_ENVS)})")
    return _ENVS[name]()


def episode_return(env, policy, rng, action_selector):
    """Sum of rewards over one episode.

    action_selector(policy, state, rng) -> action vector; it implements
    whatever action-choice rule the caller wants (mean action, sampled,
    or best-of-10 by Q).
    """
    state = env.reset(int(rng.integers(2 ** 62)))
    total = 0.0
    done = env.horizon == 0
    while not done:
        action = action_selector(policy, state, rng)
        state, reward, done = env.step(state, action)
        total += reward
    return total


def select_mean(policy, state, rng):
    return policy.mean_action_np(state[None])[0]


def select_sample(policy, state, rng):
    actions, _ = policy.sample_np(state[None], 1, rng)
    return actions[0, 0]


# -- hand-coded reference controllers ---------------------------------------


def pointmass_controller(state, kp=4.0, kd=4.0):
    """PD homing controller; a decent but imperfect baseline."""
    pos, vel = state[:2], state[2:]
    return np.clip(kp * (PointMass2D.goal - pos) - kd * vel, -1.0, 1.0)


def pendulum_controller(state, k=1.5):
    """Energy-pumping swingup with a PD catch near the top."""
    cos_t, sin_t, td = state
    theta = np.arctan2(sin_t, cos_t)
    angle = ((theta + np.pi) % (2.0 * np.pi)) - np.pi
    if abs(angle) < 0.4 and abs(td) < 2.5:
        u = -12.0 * angle - 2.5 * td
    else:
        energy = td * td / 6.0 + 5.0 * cos_t
        u = k * td * (5.0 - energy)
    return np.clip(np.array([u]), -2.0, 2.0)


def controller_selector(controller):
    """Adapts a plain state->action controller to the selector protocol."""

    def select(policy, state, rng):
        return controller(state)

    return select
