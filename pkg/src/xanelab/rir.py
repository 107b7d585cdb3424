"""Shoebox room impulse responses via the image-source method, plus room/geometry sampling."""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer, SeededRng, read_wav, write_wav
from .errors import (
    ConfigError,
    DurationTooShortError,
    GeometryOutsideRoomError,
    SamplingFailureError,
)

MAX_ORDER_CAP = 40
MIN_SOURCE_MIC_DISTANCE_M = 0.3
RIR_SIDECAR_VERSION = 1

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox room with one reflection coefficient shared by all six surfaces."""

    length_m: float
    width_m: float
    height_m: float
    reflection_coeff: float
    speed_of_sound: float = 343.0

    def __post_init__(self):
        if min(self.length_m, self.width_m, self.height_m) <= 0:
            raise ConfigError(f"room dimensions must be > 0, got {self.dimensions}")
        if not 0.0 <= self.reflection_coeff < 1.0:
            raise ConfigError(f"reflection_coeff must be in [0, 1), got {self.reflection_coeff}")
        if self.speed_of_sound <= 0:
            raise ConfigError(f"speed_of_sound must be > 0, got {self.speed_of_sound}")

    @property
    def dimensions(self) -> tuple[float, float, float]:
        return (self.length_m, self.width_m, self.height_m)

    def volume_m3(self) -> float:
        return self.length_m * self.width_m * self.height_m

    def surface_m2(self) -> float:
        lx, ly, lz = self.dimensions
        return 2.0 * (lx * ly + lx * lz + ly * lz)


@dataclass(frozen=True)
class Geometry:
    source_xyz: tuple[float, float, float]
    mic_xyz: tuple[float, float, float]

    @property
    def distance_m(self) -> float:
        return float(math.dist(self.source_xyz, self.mic_xyz))


@dataclass(frozen=True)
class ImpulseResponse:
    """
    Sampled RIR at 16 kHz.

    ``room`` and ``geometry`` are None for externally measured responses.
    """

    taps: np.ndarray
    direct_index: int
    room: RoomSpec | None = None
    geometry: Geometry | None = None

    def __post_init__(self):
        taps = np.array(self.taps, dtype=np.float64, copy=True).reshape(-1)
        if taps.size == 0:
            raise ConfigError("impulse response must have at least one tap")
        if not np.all(np.isfinite(taps)):
            raise ConfigError("impulse response taps must be finite")
        if not 0 <= self.direct_index < taps.size:
            raise ConfigError(f"direct_index {self.direct_index} outside [0, {taps.size})")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)

    @classmethod
    def from_taps(cls, taps, room: RoomSpec | None = None, geometry: Geometry | None = None) -> "ImpulseResponse":
        """Wrap measured or hand-built taps; the direct path is the largest-magnitude tap."""
        taps = np.asarray(taps, dtype=np.float64)
        return cls(taps, int(np.argmax(np.abs(taps))) if taps.size else 0, room, geometry)

    def __len__(self) -> int:
        return self.taps.shape[0]


@dataclass(frozen=True)
class RoomSamplingConfig:
    """Ranges used by :func:`sample_room`. Defaults are explicit policy, override per experiment."""

    length_range_m: tuple[float, float] = (3.0, 10.0)
    width_range_m: tuple[float, float] = (3.0, 8.0)
    height_range_m: tuple[float, float] = (2.5, 4.5)
    reflection_range: tuple[float, float] = (0.2, 0.95)
    wall_clearance_m: float = 0.5
    min_distance_m: float = MIN_SOURCE_MIC_DISTANCE_M
    max_attempts: int = 1000

    def __post_init__(self):
        for name in ("length_range_m", "width_range_m", "height_range_m", "reflection_range"):
            low, high = getattr(self, name)
            if not low < high:
                raise ConfigError(f"{name} must satisfy low < high, got {(low, high)}")
        if self.reflection_range[0] < 0 or self.reflection_range[1] >= 1:
            raise ConfigError(f"reflection_range must lie in [0, 1), got {self.reflection_range}")
        smallest = min(self.length_range_m[0], self.width_range_m[0], self.height_range_m[0])
        if smallest <= 2 * self.wall_clearance_m:
            raise ConfigError(
                f"wall_clearance_m={self.wall_clearance_m} leaves no interior in a {smallest} m dimension"
            )
        if self.max_attempts < 1:
            raise ConfigError(f"max_attempts must be >= 1, got {self.max_attempts}")


def default_max_order(reflection_coeff: float) -> int:
    """Image order where ``beta**order`` falls below 1e-4, capped at 40."""
    if reflection_coeff <= 0.0:
        return 0
    return min(MAX_ORDER_CAP, math.ceil(-4.0 / math.log10(reflection_coeff)))


def _check_inside(room: RoomSpec, point, name: str) -> None:
    for coord, size in zip(point, room.dimensions):
        if not 0.0 < coord < size:
            raise GeometryOutsideRoomError(f"{name} {tuple(point)} is not strictly inside room {room.dimensions}")


def _axis_images(source: float, mic: float, size: float, max_order: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Image offsets along one axis with their reflection counts.

    Image coordinate is ``(1 - 2q) * source + 2 m size`` with ``q`` in {0, 1};
    the image has ``|m - q| + |m|`` reflections on this axis.
    """
    m = np.arange(-max_order, max_order + 1)
    offsets, counts = [], []
    for q in (0, 1):
        reflections = np.abs(m - q) + np.abs(m)
        keep = reflections <= max_order
        offsets.append((1 - 2 * q) * source + 2.0 * m[keep] * size - mic)
        counts.append(reflections[keep])
    return np.concatenate(offsets), np.concatenate(counts)


def simulate_rir(
    room: RoomSpec,
    geom: Geometry,
    max_order: int | None = None,
    duration_s: float = 1.0,
) -> ImpulseResponse:
    """
    Image-source RIR with taps rounded to the nearest sample.

    Each image with per-axis reflection count <= ``max_order`` adds
    ``beta**(total reflections) / (4 pi d)`` at sample ``floor(d / c * fs + 0.5)``.
    Taps past ``duration_s`` are dropped.

    Args:
        room: Shoebox room
        geom: Source and microphone positions
        max_order: Per-axis reflection limit, defaults to :func:`default_max_order`
        duration_s: Output length in seconds

    Raises:
        GeometryOutsideRoomError: Source or microphone outside the room
        DurationTooShortError: Duration shorter than direct delay plus 50 ms
    """
    if max_order is None:
        max_order = default_max_order(room.reflection_coeff)
    if max_order < 0:
        raise ConfigError(f"max_order must be >= 0, got {max_order}")
    _check_inside(room, geom.source_xyz, "source")
    _check_inside(room, geom.mic_xyz, "mic")

    c = room.speed_of_sound
    n_taps = int(round(duration_s * SAMPLE_RATE))
    direct_delay_s = geom.distance_m / c
    if duration_s < direct_delay_s + 0.05:
        raise DurationTooShortError(
            f"duration_s={duration_s} must cover the direct delay {direct_delay_s:.4f} s plus 50 ms"
        )

    (dx, kx), (dy, ky), (dz, kz) = (
        _axis_images(s, m, size, max_order) for s, m, size in zip(geom.source_xyz, geom.mic_xyz, room.dimensions)
    )
    dist = np.sqrt(dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2)
    reflections = kx[:, None, None] + ky[None, :, None] + kz[None, None, :]
    index = np.floor(dist / c * SAMPLE_RATE + 0.5).astype(np.int64)

    keep = index < n_taps
    dist, reflections, index = dist[keep], reflections[keep], index[keep]
    amplitude = room.reflection_coeff ** reflections.astype(np.float64) / (4.0 * np.pi * dist)

    taps = np.zeros(n_taps)
    np.add.at(taps, index, amplitude)

    direct_index = int(math.floor(direct_delay_s * SAMPLE_RATE + 0.5))
    return ImpulseResponse(taps, direct_index, room, geom)


def _uniform_point(rng: SeededRng, room: RoomSpec, clearance: float) -> tuple[float, float, float]:
    return tuple(float(rng.uniform(clearance, size - clearance)) for size in room.dimensions)


def sample_geometry(
    rng: SeededRng, room: RoomSpec, config: RoomSamplingConfig, mic_xyz: tuple[float, float, float] | None = None
) -> Geometry:
    """
    Rejection-sample source (and optionally microphone) positions inside ``room``.

    Passing ``mic_xyz`` keeps the microphone fixed, which is how an interfering talker
    is placed in the same room as the target.
    """
    for _ in range(config.max_attempts):
        source = _uniform_point(rng, room, config.wall_clearance_m)
        mic = mic_xyz if mic_xyz is not None else _uniform_point(rng, room, config.wall_clearance_m)
        if math.dist(source, mic) >= config.min_distance_m:
            return Geometry(source, tuple(mic))
    raise SamplingFailureError(f"no valid source/mic placement after {config.max_attempts} attempts")


def sample_room(rng: SeededRng, config: RoomSamplingConfig | None = None) -> tuple[RoomSpec, Geometry]:
    """Draw room dimensions, reflection coefficient and a valid source/mic placement."""
    config = config or RoomSamplingConfig()
    room = RoomSpec(
        length_m=float(rng.uniform(*config.length_range_m)),
        width_m=float(rng.uniform(*config.width_range_m)),
        height_m=float(rng.uniform(*config.height_range_m)),
        reflection_coeff=float(rng.uniform(*config.reflection_range)),
    )
    return room, sample_geometry(rng, room, config)


def write_rir(ir: ImpulseResponse, path: str | Path) -> Path:
    """
    Export an IR as float32 WAV plus a JSON sidecar with room and geometry.

    Returns:
        Path of the sidecar file
    """
    path = Path(path)
    write_wav(AudioBuffer(ir.taps), path, subtype="FLOAT")
    sidecar = path.with_suffix(".json")
    sidecar.write_text(
        json.dumps(
            {
                "schema_version": RIR_SIDECAR_VERSION,
                "direct_index": ir.direct_index,
                "room": asdict(ir.room) if ir.room else None,
                "geometry": asdict(ir.geometry) if ir.geometry else None,
            },
            indent=2,
            sort_keys=True,
        )
    )
    return sidecar


def read_rir(path: str | Path) -> ImpulseResponse:
    """
    Load an IR exported by :func:`write_rir` or a measured IR with a sidecar whose room fields are null.

    A missing sidecar or null ``direct_index`` falls back to ``argmax |taps|``.
    """
    path = Path(path)
    taps = read_wav(path).samples
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}

    room = RoomSpec(**meta["room"]) if meta.get("room") else None
    geometry = None
    if meta.get("geometry"):
        geometry = Geometry(tuple(meta["geometry"]["source_xyz"]), tuple(meta["geometry"]["mic_xyz"]))
    if meta.get("direct_index") is None:
        return ImpulseResponse.from_taps(taps, room, geometry)
    return ImpulseResponse(taps, int(meta["direct_index"]), room, geometry)
