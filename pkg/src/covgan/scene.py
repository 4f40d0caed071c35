"""Street-canyon geometry and deterministic image-source ray synthesis.

A parametric street scene (two reflecting building walls, flat ground,
N elevated basestations) replaces an external ray tracer. Multipath is
enumerated with the image-source method: the line-of-sight ray plus
mirror images of the user across wall/ground planes, chained up to
``max_bounces``. Everything is a pure function of the geometry, so the
map from user location to channel is deterministic and learnable.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

from scipy.constants import speed_of_light

SPEED_OF_LIGHT = float(speed_of_light)  # m/s


class SceneError(ValueError):
    """Invalid scene geometry or a query outside the street footprint."""


@dataclass(frozen=True)
class SceneConfig:
    """Street scene parameters (SI units).

    ``bs_positions`` are 3D points in meters. ``wall_y`` holds the y
    coordinates of the two reflecting building walls; the ground plane
    sits at ``ground_z``. ``max_paths`` caps how many rays survive
    strongest-path selection.
    """

    street_length_m: float = 30.0  # x extent
    street_width_m: float = 20.0  # y extent
    wall_y: tuple[float, float] = (0.0, 20.0)
    ground_z: float = 0.0
    bs_positions: tuple[tuple[float, float, float], ...] = (
        (0.0, 0.0, 6.0),
        (30.0, 0.0, 6.0),
        (0.0, 20.0, 6.0),
        (30.0, 20.0, 6.0),
    )
    bs_height_m: float = 6.0
    user_height_m: float = 1.0
    carrier_hz: float = 60e9
    reflection_coeff: float = 0.6
    max_bounces: int = 1
    max_paths: int = 5


@dataclass(frozen=True)
class PropPath:
    """One propagation ray as seen at the BS array."""

    aoa_rad: float  # azimuth at the BS ULA, broadside = 0, sign follows +y
    delay_s: float
    gain: complex  # free-space loss, reflection losses and carrier phase
    bounces: int
    length_m: float


@dataclass(frozen=True)
class PathSet:
    """Paths for one (BS, user location) pair, sorted by descending |gain|."""

    bs_index: int
    user_xy: tuple[float, float]
    paths: tuple[PropPath, ...]


@dataclass(frozen=True)
class Scene:
    """A validated, immutable scene. Construct via :func:`build_scene`."""

    config: SceneConfig

    @property
    def n_bs(self) -> int:
        return len(self.config.bs_positions)

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / self.config.carrier_hz

    def contains(self, x: float, y: float) -> bool:
        """Inclusive footprint membership test."""
        return (
            0.0 <= x <= self.config.street_length_m
            and 0.0 <= y <= self.config.street_width_m
        )


def build_scene(config: SceneConfig) -> Scene:
    """Validate geometry and wrap it into an immutable :class:`Scene`."""
    if config.street_length_m <= 0 or config.street_width_m <= 0:
        raise SceneError("street dimensions must be positive")
    if not config.wall_y[0] < config.wall_y[1]:
        raise SceneError(f"wall_y must be ordered, got {config.wall_y}")
    if config.carrier_hz <= 0:
        raise SceneError("carrier_hz must be positive")
    if not 0 < config.reflection_coeff <= 1:
        raise SceneError("reflection_coeff must be in (0, 1]")
    if config.max_bounces < 0:
        raise SceneError("max_bounces must be >= 0")
    if config.max_paths < 1:
        raise SceneError("max_paths must be >= 1")
    if len(config.bs_positions) < 1:
        raise SceneError("at least one BS position required")
    if config.user_height_m <= config.ground_z:
        raise SceneError("user height must be above the ground plane")
    for i, (x, y, z) in enumerate(config.bs_positions):
        if not (0.0 <= x <= config.street_length_m and 0.0 <= y <= config.street_width_m):
            raise SceneError(f"BS {i} at ({x}, {y}) outside the street footprint")
        if z <= config.ground_z:
            raise SceneError(f"BS {i} must be above the ground plane")
    return Scene(config=config)


def friis_gain(length_m: float, carrier_hz: float) -> float:
    """Free-space amplitude gain lambda / (4 pi length)."""
    if length_m <= 0:
        raise SceneError("path length must be positive")
    wavelength = SPEED_OF_LIGHT / carrier_hz
    return wavelength / (4.0 * math.pi * length_m)


def select_strongest(paths: list[PropPath], max_paths: int) -> list[PropPath]:
    """Keep the ``max_paths`` largest-|gain| paths, sorted descending.

    Ties broken by smaller delay, then smaller AoA.
    """
    if max_paths < 1:
        raise SceneError("max_paths must be >= 1")
    ranked = sorted(paths, key=lambda p: (-abs(p.gain), p.delay_s, p.aoa_rad))
    return ranked[:max_paths]


def _reflect(point: tuple[float, float, float], surface: tuple[str, float]) -> tuple[float, float, float]:
    kind, coord = surface
    x, y, z = point
    if kind == "wall":
        return (x, 2.0 * coord - y, z)
    return (x, y, 2.0 * coord - z)


def _mirror_sequences(surfaces: list[tuple[str, float]], max_bounces: int):
    """All reflection orders up to max_bounces, no surface repeated twice in a row."""
    frontier: list[tuple[tuple[str, float], ...]] = [()]
    yield ()
    for _ in range(max_bounces):
        nxt = []
        for seq in frontier:
            for surf in surfaces:
                if seq and seq[-1] == surf:
                    continue
                ext = seq + (surf,)
                yield ext
                nxt.append(ext)
        frontier = nxt


def trace_paths(scene: Scene, user_xy: tuple[float, float], bs_index: int) -> PathSet:
    """Enumerate LOS + image-source reflections for one (BS, user) pair.

    Each candidate carries geometric length, delay = length/c, the AoA at
    the BS ULA (array along the y axis, broadside = 0) and complex gain
    friis * reflection_coeff**bounces * exp(-j 2 pi f_c delay). The output
    is passed through :func:`select_strongest`.
    """
    cfg = scene.config
    x, y = float(user_xy[0]), float(user_xy[1])
    if not scene.contains(x, y):
        raise SceneError(f"user at ({x}, {y}) outside the street footprint")
    if not 0 <= bs_index < scene.n_bs:
        raise SceneError(f"bs_index {bs_index} out of range")

    bs = cfg.bs_positions[bs_index]
    user = (x, y, cfg.user_height_m)
    surfaces = [("wall", cfg.wall_y[0]), ("wall", cfg.wall_y[1]), ("ground", cfg.ground_z)]

    candidates = []
    for seq in _mirror_sequences(surfaces, cfg.max_bounces):
        image = user
        for surf in seq:
            image = _reflect(image, surf)
        dx, dy, dz = (image[0] - bs[0], image[1] - bs[1], image[2] - bs[2])
        length = math.sqrt(dx * dx + dy * dy + dz * dz)
        if length == 0.0:
            raise SceneError("user coincides with a BS")
        delay = length / SPEED_OF_LIGHT
        aoa = math.asin(max(-1.0, min(1.0, dy / length)))
        amp = friis_gain(length, cfg.carrier_hz) * cfg.reflection_coeff ** len(seq)
        phase = -2.0 * math.pi * cfg.carrier_hz * delay
        gain = amp * complex(math.cos(phase), math.sin(phase))
        candidates.append(
            PropPath(aoa_rad=aoa, delay_s=delay, gain=gain, bounces=len(seq), length_m=length)
        )

    kept = select_strongest(candidates, cfg.max_paths)
    return PathSet(bs_index=bs_index, user_xy=(x, y), paths=tuple(kept))


def scene_digest(config: SceneConfig) -> str:
    """Hex SHA-256 of the canonical scene configuration."""
    payload = json.dumps(
        {
            "street_length_m": config.street_length_m,
            "street_width_m": config.street_width_m,
            "wall_y": list(config.wall_y),
            "ground_z": config.ground_z,
            "bs_positions": [list(p) for p in config.bs_positions],
            "bs_height_m": config.bs_height_m,
            "user_height_m": config.user_height_m,
            "carrier_hz": config.carrier_hz,
            "reflection_coeff": config.reflection_coeff,
            "max_bounces": config.max_bounces,
            "max_paths": config.max_paths,
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
