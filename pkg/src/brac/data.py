"""Offline transition datasets: collection with noise mixtures, binary
persistence, and uniform minibatch sampling.

Columns are stored in float32 (the on-disk precision); training code upcasts
batches to float64. The file layout is:

    magic "BRACDS1\\0"
    u64 env-name length, env-name bytes
    u64 state_dim, u64 action_dim, u64 count
    u64 noise-tag length, noise-tag bytes
    count records of (s, a, r, s') as little-endian float32 + done byte
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, FormatError

MAGIC = b"BRACDS1\x00"


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class NoiseConfig:
    """Behavior-noise recipe for dataset collection.

    kind "none" executes the base policy as is. "eps" takes a uniformly
    random action with probability p; "gauss" adds N(0, sigma^2) noise to the
    sampled action (clipped to bounds). For the noisy kinds the dataset is a
    mixture: fractions of transitions from the noisy policy, the clean
    policy, and a uniform random walk.
    """

    kind: str = "none"
    level: float = 0.0
    mixture: tuple = (0.4, 0.4, 0.2)

    def __post_init__(self):
        if self.kind not in ("none", "eps", "gauss"):
            raise ConfigError(f"unknown noise kind '{self.kind}'")
        if self.kind == "eps" and not 0.0 <= self.level <= 1.0:
            raise ConfigError("eps probability must be in [0, 1]")
        if self.kind == "gauss" and self.level < 0.0:
            raise ConfigError("gauss sigma must be >= 0")
        if abs(sum(self.mixture) - 1.0) > 1e-12:
            raise ConfigError("mixture fractions must sum to 1")

    @property
    def tag(self):
        if self.kind == "none":
            return "no-noise"
        return f"{self.kind}-{self.level:g}"

    @staticmethod
    def parse(text):
        """Parse CLI syntax: none | eps:P | gauss:S."""
        if text == "none":
            return NoiseConfig("none")
        if ":" in text:
            kind, level = text.split(":", 1)
            return NoiseConfig(kind, float(level))
        raise ConfigError(f"cannot parse noise spec '{text}'")


@dataclass
class OfflineDataset:
    env_name: str
    noise_tag: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray  # uint8

    def __post_init__(self):
        n = len(self.states)
        for col in (self.actions, self.rewards, self.next_states, self.dones):
            if len(col) != n:
                raise ConfigError("dataset columns disagree on length")

    @property
    def count(self):
        return len(self.states)

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def action_dim(self):
        return self.actions.shape[1]

    def average_episode_return(self):
        """Mean return over the complete episodes in the dataset."""
        ends = np.flatnonzero(self.dones)
        if ends.size == 0:
            raise ContractError("dataset contains no complete episode")
        returns = []
        start = 0
        for end in ends:
            returns.append(float(np.sum(self.rewards[start:end + 1])))
            start = end + 1
        return float(np.mean(returns))


@dataclass
class Batch:
    """A float64 minibatch view used by the trainer."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray


def segment_sizes(n, mixture):
    """Exact transition counts per mixture segment (sums to n)."""
    first = int(round(mixture[0] * n))
    second = int(round(mixture[1] * n))
    return first, second, n - first - second


def collect(env, base_policy, noise, n, rng):
    """Roll episodes until n transitions are logged.

    Noisy kinds produce three contiguous segments (noisy, clean, random
    walk) with the mixture's exact transition counts; episodes are rolled
    whole and the last one is truncated at the segment quota.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    if noise.kind == "none":
        segments = [("clean", n)]
    else:
        sizes = segment_sizes(n, noise.mixture)
        segments = [("noisy", sizes[0]), ("clean", sizes[1]), ("walk", sizes[2])]

    cols = {k: [] for k in ("s", "a", "r", "s2", "d")}

    def behavior_action(mode, state):
        if mode == "walk":
            return rng.uniform(env.action_low, env.action_high)
        action = base_policy.sample_np(state[None], 1, rng)[0][0, 0]
        if mode == "noisy":
            if noise.kind == "eps":
                if rng.random() < noise.level:
                    return rng.uniform(env.action_low, env.action_high)
            elif noise.kind == "gauss":
                action = np.clip(action + rng.normal(0.0, noise.level,
                                                     size=env.action_dim),
                                 env.action_low, env.action_high)
        return action

    for mode, quota in segments:
        have = 0
        while have < quota:
            state = env.reset(int(rng.integers(2 ** 62)))
            done = False
            while not done and have < quota:
                action = behavior_action(mode, state)
                nxt, reward, done = env.step(state, action)
                cols["s"].append(state)
                cols["a"].append(np.asarray(action, dtype=np.float64))
                cols["r"].append(reward)
                cols["s2"].append(nxt)
                cols["d"].append(done)
                state = nxt
                have += 1

    return OfflineDataset(
        env_name=env.name,
        noise_tag=noise.tag,
        states=np.asarray(cols["s"], dtype=np.float32),
        actions=np.asarray(cols["a"], dtype=np.float32),
        rewards=np.asarray(cols["r"], dtype=np.float32),
        next_states=np.asarray(cols["s2"], dtype=np.float32),
        dones=np.asarray(cols["d"], dtype=np.uint8),
    )


def _record_dtype(state_dim, action_dim):
    return np.dtype([
        ("s", "<f4", (state_dim,)),
        ("a", "<f4", (action_dim,)),
        ("r", "<f4"),
        ("s2", "<f4", (state_dim,)),
        ("d", "u1"),
    ])


def save(ds, path):
    name = ds.env_name.encode()
    tag = ds.noise_tag.encode()
    rec = np.empty(ds.count, dtype=_record_dtype(ds.state_dim, ds.action_dim))
    rec["s"], rec["a"], rec["r"] = ds.states, ds.actions, ds.rewards
    rec["s2"], rec["d"] = ds.next_states, ds.dones
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(name)))
        f.write(name)
        f.write(struct.pack("<QQQ", ds.state_dim, ds.action_dim, ds.count))
        f.write(struct.pack("<Q", len(tag)))
        f.write(tag)
        f.write(rec.tobytes())


def load(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    off = 8

    def read_u64():
        nonlocal off
        if off + 8 > len(blob):
            raise FormatError(f"{path}: truncated header")
        (v,) = struct.unpack_from("<Q", blob, off)
        off += 8
        return v

    def read_bytes(k):
        nonlocal off
        if off + k > len(blob):
            raise FormatError(f"{path}: truncated header")
        out = blob[off:off + k]
        off += k
        return out

    env_name = read_bytes(read_u64()).decode()
    state_dim, action_dim, count = read_u64(), read_u64(), read_u64()
    noise_tag = read_bytes(read_u64()).decode()
    dtype = _record_dtype(state_dim, action_dim)
    body = len(blob) - off
    if body != count * dtype.itemsize:
        raise FormatError(
            f"{path}: body is {body} bytes, expected {count * dtype.itemsize}")
    rec = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
    return OfflineDataset(
        env_name=env_name,
        noise_tag=noise_tag,
        states=rec["s"].copy(),
        actions=rec["a"].copy(),
        rewards=rec["r"].copy(),
        next_states=rec["s2"].copy(),
        dones=rec["d"].copy(),
    )


def sample_batch(ds, batch_size, rng):
    """Uniform-with-replacement minibatch, upcast to float64."""
    if ds.count == 0:
        raise ContractError("cannot sample from an empty dataset")
    if batch_size > ds.count:
        raise ContractError("batch_size exceeds dataset size")
    idx = rng.integers(0, ds.count, size=batch_size)
    return Batch(
        states=ds.states[idx].astype(np.float64),
        actions=ds.actions[idx].astype(np.float64),
        rewards=ds.rewards[idx].astype(np.float64),
        next_states=ds.next_states[idx].astype(np.float64),
        dones=ds.dones[idx].astype(np.float64),
    )
