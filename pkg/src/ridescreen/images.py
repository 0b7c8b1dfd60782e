"""Grayscale stay-time trajectory images and multi-day image stacks.

Pixel intensity saturates at a stay-time threshold T:
pixel = min(stay / T, 1) * 255, kept as a real value end to end; 8-bit
quantization happens only in the optional PNG export.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MissingData, ShapeError
from .traj import GridSpec, Trajectory, segment_days, stay_time_grid

DEFAULT_THRESHOLD_S = 3600.0
DEFAULT_STACK_DAYS = 7

TIMG_MAGIC = b"TIMG"
TIMG_VERSION = 1


@dataclass
class TrajectoryImage:
    """One day's stay-time image; pixels are reals in [0, 255]."""

    pixels: np.ndarray
    day_index: int


@dataclass
class ImageStack:
    """K day-images of one vehicle in day order.

    Absent days are all-zero channels; ``present`` records which channels
    hold real data so day-level prediction can skip the fill.
    """

    vehicle_id: str
    pixels: np.ndarray  # (K, M, N)
    present: np.ndarray  # (K,) bool

    @property
    def k(self) -> int:
        return self.pixels.shape[0]


def render_image(stay: np.ndarray, threshold_s: float = DEFAULT_THRESHOLD_S, day_index: int = 0) -> TrajectoryImage:
    """Map a stay-time grid (seconds) to pixel intensities."""
    if threshold_s <= 0:
        raise ConfigError(f"stay-time threshold must be positive, got {threshold_s}")
    stay = np.asarray(stay, dtype=np.float64)
    pixels = np.minimum(stay / threshold_s, 1.0) * 255.0
    return TrajectoryImage(pixels=pixels, day_index=day_index)


def normalize(img) -> np.ndarray:
    """Scale pixels from [0, 255] to [0, 1] for network input."""
    pixels = img.pixels if isinstance(img, TrajectoryImage) else np.asarray(img)
    return np.asarray(pixels, dtype=np.float64) / 255.0


def stack_images(vehicle_id: str, images: dict, k: int = DEFAULT_STACK_DAYS) -> ImageStack:
    """Assemble day-indexed images (mapping channel -> TrajectoryImage) into a K-channel stack."""
    if len(images) > k:
        raise ConfigError(f"{len(images)} day images exceed the {k}-channel stack")
    shape = None
    for img in images.values():
        shape = img.pixels.shape
        break
    if shape is None:
        shape = (24, 24)
    pixels = np.zeros((k,) + shape, dtype=np.float64)
    present = np.zeros(k, dtype=bool)
    for channel, img in images.items():
        if not 0 <= channel < k:
            raise ConfigError(f"day channel {channel} outside 0..{k - 1}")
        if img.pixels.shape != shape:
            raise ShapeError("all day images in a stack must share dimensions")
        pixels[channel] = img.pixels
        present[channel] = True
    return ImageStack(vehicle_id=vehicle_id, pixels=pixels, present=present)


def build_stack(
    t: Trajectory,
    grid: GridSpec,
    k: int = DEFAULT_STACK_DAYS,
    base_day: int = 0,
    threshold_s: float = DEFAULT_THRESHOLD_S,
    tz_offset_hours: float = 0.0,
    gap_cap_s: float = 1800.0,
) -> ImageStack:
    """Render one vehicle's day segments and place them at calendar-aligned channels.

    Channel = calendar_day - base_day, so stacks of different vehicles line
    up on the same observation window.
    """
    images = {}
    for seg in segment_days(t, tz_offset_hours):
        channel = seg.calendar_day - base_day
        if not 0 <= channel < k:
            raise ConfigError(
                f"vehicle {t.vehicle_id} has data on day {seg.calendar_day}, "
                f"outside the {k}-day window starting at day {base_day}"
            )
        stay = stay_time_grid(seg, grid, gap_cap_s)
        images[channel] = render_image(stay, threshold_s, day_index=channel)
    return stack_images(t.vehicle_id, images, k)


def write_timg(path, stack: ImageStack) -> None:
    """Binary stack file: magic 'TIMG', u32 version, u32 M, u32 N, u32 K, then
    K*M*N little-endian float32 row-major."""
    k, m, n = stack.pixels.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIII", TIMG_MAGIC, TIMG_VERSION, m, n, k))
        fh.write(stack.pixels.astype("<f4").tobytes(order="C"))


def read_timg(path, vehicle_id: str = "") -> ImageStack:
    """Read a TIMG file; channels that are entirely zero are marked absent."""
    with open(path, "rb") as fh:
        header = fh.read(20)
        if len(header) != 20:
            raise ConfigError(f"{path}: truncated TIMG header")
        magic, version, m, n, k = struct.unpack("<4sIIII", header)
        if magic != TIMG_MAGIC:
            raise ConfigError(f"{path}: bad magic {magic!r}")
        if version != TIMG_VERSION:
            raise ConfigError(f"{path}: unsupported TIMG version {version}")
        payload = fh.read(4 * k * m * n)
        if len(payload) != 4 * k * m * n:
            raise ConfigError(f"{path}: truncated TIMG payload")
    pixels = np.frombuffer(payload, dtype="<f4").reshape(k, m, n).astype(np.float64)
    present = np.array([bool(np.any(ch)) for ch in pixels])
    return ImageStack(vehicle_id=vehicle_id, pixels=pixels, present=present)


def export_png(path, img: TrajectoryImage) -> None:
    """8-bit grayscale PNG for visual inspection (round-half-even quantization)."""
    from PIL import Image

    quantized = np.rint(np.clip(img.pixels, 0.0, 255.0)).astype(np.uint8)
    Image.fromarray(quantized, mode="L").save(path)


def day_level_inputs(stack: ImageStack):
    """Non-masked channels as (n, 1, M, N) normalized network inputs."""
    if not stack.present.any():
        raise MissingData(f"vehicle {stack.vehicle_id}: every day channel is masked")
    return normalize(stack.pixels[stack.present])[:, None, :, :]


def car_level_input(stack: ImageStack):
    """The whole stack as a (1, K, M, N) normalized network input."""
    return normalize(stack.pixels)[None, :, :, :]
