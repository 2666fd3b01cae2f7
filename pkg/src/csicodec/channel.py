"""Synthetic wideband downlink CSI from a sum of multipath components.

Row ``n`` of a user's ``N_c x N_t`` channel matrix is

    h_n = sqrt(N_t / L) * sum_l alpha_l * exp(-j 2 pi tau_l f_s n / N_c) * a(phi_l)

with ``a`` the steering vector of a uniform linear array. Users of one scene
share a set of far-scatterer paths verbatim and each has its own local
paths, which is what makes the CSI of nearby users correlated.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ArrayConfig:
    n_antennas: int = 16
    spacing: float = 0.5  # antenna spacing in wavelengths

    def __post_init__(self):
        if self.n_antennas < 1:
            raise ValueError("n_antennas must be >= 1")
        if not self.spacing > 0:
            raise ValueError("antenna spacing must be positive")


@dataclass(frozen=True)
class MultipathComponent:
    gain: complex
    delay: float  # seconds
    aod: float  # radians, |aod| <= pi/2

    def __post_init__(self):
        if abs(self.aod) > math.pi / 2 + 1e-12:
            raise ValueError(f"angle of departure {self.aod} outside [-pi/2, pi/2]")
        if self.delay < 0:
            raise ValueError("delay must be non-negative")


@dataclass
class SceneConfig:
    n_subcarriers: int = 32
    sampling_rate: float = 20e6
    n_shared_paths: int = 0
    n_local_paths_per_user: int = 6
    area_side: float = 20.0
    delay_spread: float = 200e-9
    rng_seed: int = 0
    n_users: int = 1
    # expected share of channel power carried by the shared paths; None keeps
    # the share proportional to the path counts
    shared_power_fraction: float | None = None
    # if set, users are dropped within this radius (m) of a common point
    user_spread: float | None = None
    # literal reading of the channel formula: one AoD per user, taken from
    # its position relative to the array at the centre of the area
    single_aod: bool = False
    # if set, local paths leave the array within this angular spread
    # (radians, Laplacian) around the user's direction; otherwise their AoDs
    # are uniform like the shared paths
    local_angular_spread: float | None = None

    def __post_init__(self):
        if self.n_subcarriers < 1:
            raise ValueError("n_subcarriers must be >= 1")
        if not self.sampling_rate > 0:
            raise ValueError("sampling_rate must be positive")
        if self.n_shared_paths < 0:
            raise ValueError("n_shared_paths must be >= 0")
        if self.n_local_paths_per_user < 1:
            raise ValueError("n_local_paths_per_user must be >= 1")
        if self.n_users < 1:
            raise ValueError("n_users must be >= 1")
        if self.delay_spread < 0:
            raise ValueError("delay_spread must be non-negative")
        if self.local_angular_spread is not None and self.local_angular_spread < 0:
            raise ValueError("local_angular_spread must be non-negative")
        f = self.shared_power_fraction
        if f is not None and not 0.0 <= f <= 1.0:
            raise ValueError("shared_power_fraction must lie in [0, 1]")

    @property
    def paths_per_user(self) -> int:
        return self.n_shared_paths + self.n_local_paths_per_user


@dataclass
class MultiUserScene:
    shared_paths: list[MultipathComponent]
    per_user_paths: list[list[MultipathComponent]]
    positions: list[tuple[float, float]]
    array_position: tuple[float, float] = (0.0, 0.0)

    @property
    def n_users(self) -> int:
        return len(self.per_user_paths)

    def paths(self, user_index: int) -> list[MultipathComponent]:
        return self.shared_paths + self.per_user_paths[user_index]

    def user_aod(self, user_index: int) -> float:
        return scene_user_aod(self, user_index)


def scene_user_aod(scene: MultiUserScene, user_index: int) -> float:
    """AoD of the line from the array to the user, measured from broadside
    (the array lies along the x axis)."""
    x, y = scene.positions[user_index]
    ax, ay = scene.array_position
    dx, dy = x - ax, y - ay
    dist = math.hypot(dx, dy)
    return 0.0 if dist == 0 else math.asin(max(-1.0, min(1.0, dx / dist)))


@dataclass
class ChannelMatrix:
    data: np.ndarray  # complex, (N_c, N_t)
    user_position: tuple[float, float] = field(default=(0.0, 0.0))


def steering_vector(aod: float, array: ArrayConfig) -> np.ndarray:
    t = np.arange(array.n_antennas)
    return np.exp(-2j * np.pi * array.spacing * t * math.sin(aod))


def generate_channel(scene: MultiUserScene, user_index: int, config: SceneConfig,
                     array: ArrayConfig) -> ChannelMatrix:
    if not 0 <= user_index < scene.n_users:
        raise IndexError(f"user {user_index} not in scene with {scene.n_users} users")
    paths = scene.paths(user_index)
    if not paths:
        raise ValueError("a user needs at least one multipath component")
    n_c, n_t = config.n_subcarriers, array.n_antennas
    gains = np.array([p.gain for p in paths], dtype=np.complex128)
    delays = np.array([p.delay for p in paths])
    if config.single_aod:
        aods = np.full(len(paths), scene.user_aod(user_index))
    else:
        aods = np.array([p.aod for p in paths])
    n = np.arange(n_c)
    # (N_c, L) frequency responses and (L, N_t) steering vectors
    freq = np.exp(-2j * np.pi * config.sampling_rate * np.outer(n / n_c, delays))
    steer = np.exp(-2j * np.pi * array.spacing * np.outer(np.sin(aods), np.arange(n_t)))
    h = math.sqrt(n_t / len(paths)) * (freq * gains) @ steer
    return ChannelMatrix(h, scene.positions[user_index])


def _draw_paths(rng: np.random.Generator, count: int, config: SceneConfig, total_power: float,
                centre_aod: float | None = None) -> list[MultipathComponent]:
    if count == 0:
        return []
    delays = rng.uniform(0.0, config.delay_spread, count)
    decay = config.delay_spread / 3.0
    power = np.exp(-delays / decay) if decay > 0 else np.ones(count)
    power *= total_power / power.sum()
    gains = np.sqrt(power / 2.0) * (rng.standard_normal(count) + 1j * rng.standard_normal(count))
    if centre_aod is None:
        aods = rng.uniform(-math.pi / 2, math.pi / 2, count)
    else:
        spread = config.local_angular_spread / math.sqrt(2.0)
        aods = np.clip(centre_aod + rng.laplace(0.0, spread, count), -math.pi / 2, math.pi / 2)
    return [MultipathComponent(complex(g), float(d), float(a)) for g, d, a in zip(gains, delays, aods)]


def sample_scene(config: SceneConfig, rng: np.random.Generator) -> MultiUserScene:
    """Draw user positions, shared paths once and local paths per user."""
    side = config.area_side
    if config.user_spread is None:
        pos = rng.uniform(0.0, side, (config.n_users, 2))
    else:
        centre = rng.uniform(0.0, side, 2)
        radius = config.user_spread * np.sqrt(rng.uniform(0.0, 1.0, config.n_users))
        angle = rng.uniform(0.0, 2 * math.pi, config.n_users)
        pos = centre + np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    positions = [(float(x), float(y)) for x, y in pos]
    scene = MultiUserScene([], [], positions, array_position=(side / 2, side / 2))

    if config.shared_power_fraction is None:
        shared_power = config.n_shared_paths / config.paths_per_user
    else:
        shared_power = config.shared_power_fraction if config.n_shared_paths else 0.0
    scene.shared_paths = _draw_paths(rng, config.n_shared_paths, config, shared_power)
    for u in range(config.n_users):
        centre = None if config.local_angular_spread is None else scene_user_aod(scene, u)
        scene.per_user_paths.append(
            _draw_paths(rng, config.n_local_paths_per_user, config, 1.0 - shared_power, centre)
        )
    return scene


def generate_dataset(config: SceneConfig, array: ArrayConfig, n_scenes: int,
                     seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Channels of every user over ``n_scenes`` independent scenes.

    Returns ``(H, positions)`` with ``H`` of shape ``(n_users, n_scenes, N_c,
    N_t)`` and positions ``(n_users, n_scenes, 2)``. Scene ``i`` is drawn
    from its own generator seeded by ``(seed, i)``, so any scene can be
    regenerated independently.
    """
    seed = config.rng_seed if seed is None else seed
    k = config.n_users
    out = np.empty((k, n_scenes, config.n_subcarriers, array.n_antennas), dtype=np.complex128)
    pos = np.empty((k, n_scenes, 2))
    for i in range(n_scenes):
        scene = sample_scene(config, np.random.default_rng([seed, i]))
        for u in range(k):
            ch = generate_channel(scene, u, config, array)
            out[u, i] = ch.data
            pos[u, i] = ch.user_position
    return out, pos


def normalization_scale(matrices: np.ndarray) -> float:
    """Constant that brings the mean per-entry power of ``matrices`` to 1."""
    power = float(np.mean(np.abs(matrices) ** 2))
    if power == 0:
        raise ValueError("cannot normalise an all-zero dataset")
    return 1.0 / math.sqrt(power)


# ---------------------------------------------------------------------------
# dataset files

DATASET_MAGIC = b"CSID"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<4sHIII")


class DatasetError(Exception):
    pass


class DatasetHeaderError(DatasetError):
    pass


class DatasetShapeError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


@dataclass
class Dataset:
    matrices: np.ndarray  # complex64, (count, N_c, N_t)
    positions: np.ndarray | None = None  # float32, (count, 2)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrices.shape[1], self.matrices.shape[2]

    def __len__(self) -> int:
        return self.matrices.shape[0]


def write_dataset(path, matrices, positions=None, n_subcarriers: int | None = None,
                  n_antennas: int | None = None) -> None:
    """Write complex matrices as little-endian float32 pairs.

    ``matrices`` is a sequence (or array) of equally shaped complex
    matrices; an empty sequence needs explicit dimensions (or writes 0 x 0).
    """
    mats = [np.asarray(m) for m in matrices]
    if mats:
        shape = mats[0].shape
        if len(shape) != 2 or any(m.shape != shape for m in mats):
            raise DatasetShapeError("all matrices must be 2-D with the same shape")
        n_c, n_t = shape
        if (n_subcarriers, n_antennas) not in ((None, None), (n_c, n_t)):
            raise DatasetShapeError("declared dimensions disagree with the matrices")
    else:
        n_c, n_t = n_subcarriers or 0, n_antennas or 0
    data = np.stack(mats).astype(np.complex64) if mats else np.zeros((0, n_c, n_t), np.complex64)
    if not np.all(np.isfinite(data.view(np.float32))):
        raise ValueError("dataset entries must be finite")
    body = data.astype("<c8").tobytes()
    if positions is not None:
        pos = np.asarray(positions, dtype="<f4")
        if pos.shape != (len(mats), 2):
            raise DatasetShapeError(f"positions must have shape ({len(mats)}, 2), got {pos.shape}")
        body += pos.tobytes()
    Path(path).write_bytes(_DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n_c, n_t, len(mats)) + body)


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _DS_HEADER.size:
        raise DatasetTruncatedError(f"{path}: {len(raw)} bytes is shorter than the header")
    magic, version, n_c, n_t, count = _DS_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise DatasetHeaderError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetHeaderError(f"{path}: unsupported version {version}")
    body = raw[_DS_HEADER.size:]
    n_mat = count * n_c * n_t * 8
    if len(body) < n_mat:
        raise DatasetTruncatedError(f"{path}: expected {n_mat} matrix bytes, found {len(body)}")
    mats = np.frombuffer(body[:n_mat], dtype="<c8").astype(np.complex64).reshape(count, n_c, n_t)
    rest = len(body) - n_mat
    positions = None
    if rest == count * 8 and rest:
        positions = np.frombuffer(body[n_mat:], dtype="<f4").astype(np.float32).reshape(count, 2)
    elif rest:
        raise DatasetShapeError(f"{path}: {rest} trailing bytes match neither 0 nor {count} positions")
    return Dataset(mats, positions)
