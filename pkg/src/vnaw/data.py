"""Synthetic labelled clips, symmetric label noise, and the VCLP clip file format.

VCLP layout (little-endian)::

    b"VCLP" | u16 version=1 | u32 P | u32 C | u32 H | u32 W | u16 label | P*C*H*W f32

Frames are row-major ``(P, C, H, W)``. A dataset directory holds one file per
clip plus ``manifest.csv`` with ``clip_id,path,label,clean_label``.
"""

from __future__ import annotations

import csv
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import Clip
from .config import ConfigError
from .tensors import RngStream

MAGIC = b"VCLP"
VERSION = 1
HEADER = struct.Struct("<4sHIIIIH")
MAX_ELEMENTS = 2**31 - 1
MANIFEST = "manifest.csv"

CLIP_STREAM = 0
NOISE_STREAM = 1


class ClipFormatError(ValueError):
    """Malformed VCLP file."""


class BadMagicError(ClipFormatError):
    pass


class TruncatedPayloadError(ClipFormatError):
    pass


class DimensionOverflowError(ClipFormatError):
    pass


class UnsupportedVersionError(ClipFormatError):
    pass


@dataclass
class LabeledClip:
    clip: Clip
    label: int
    clip_id: str
    clean_label: int | None = None

    def __post_init__(self):
        if self.clean_label is None:
            self.clean_label = self.label


@dataclass(frozen=True)
class GenConfig:
    classes: int = 8
    clips: int = 1600
    frames: int = 16
    channels: int = 1
    height: int = 16
    width: int = 16
    imbalance: float = 1.0
    noise: float = 0.0
    snr: float = 4.0
    seed: int = 0

    def validate(self) -> "GenConfig":
        for name in ("classes", "clips", "frames", "channels", "height", "width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.classes < 2:
            raise ConfigError("need at least two classes")
        if self.imbalance < 1:
            raise ConfigError("imbalance ratio must be >= 1")
        if not (0 <= self.noise < 1):
            raise ConfigError("label noise rate must lie in [0, 1)")
        if self.snr <= 0:
            raise ConfigError("snr must be positive")
        return self


def class_priors(classes: int, imbalance: float) -> np.ndarray:
    """Geometric class prior, ``P(k) ∝ imbalance**(-k)`` for 0-based ``k``."""
    w = float(imbalance) ** -np.arange(classes, dtype=np.float64)
    return w / w.sum()


def worker_count() -> int:
    env = os.environ.get("VNAW_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"VNAW_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise ConfigError("VNAW_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def render_clip(label: int, cfg: GenConfig, rng: RngStream) -> np.ndarray:
    """One clip of class ``label``: a drifting Gaussian blob carrying a sinusoidal grating.

    Drift direction and grating frequency depend on the class; start offset,
    grating phase and pixel noise are per clip.
    """
    k, p, h, w = cfg.classes, cfg.frames, cfg.height, cfg.width
    angle = 2 * np.pi * label / k
    direction = np.array([np.cos(angle), np.sin(angle)])
    speed = 0.7 / max(p - 1, 1)  # total drift 0.7 in [-1, 1] coordinates
    freq = 1.0 + 0.5 * (label % 4)
    jitter = rng.gen.normal(0.0, 0.08, size=2)
    phase = rng.gen.uniform(0, 2 * np.pi)

    ys, xs = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    t = np.arange(p, dtype=np.float64)
    cx = jitter[0] + direction[0] * speed * t
    cy = jitter[1] + direction[1] * speed * t
    dx = xs[None] - cx[:, None, None]
    dy = ys[None] - cy[:, None, None]
    blob = np.exp(-(dx**2 + dy**2) / (2 * 0.35**2))
    grating = 0.5 * (1 + np.cos(2 * np.pi * freq * (dx * direction[0] + dy * direction[1]) + phase))
    amplitude = 0.8
    base = 0.1 + amplitude * blob * (0.4 + 0.6 * grating)
    noise = rng.gen.normal(0.0, amplitude / cfg.snr, size=(p, cfg.channels, h, w))
    frames = np.clip(base[:, None] + noise, 0.0, 1.0)
    return frames.astype(np.float32)


def _make_clip(i: int, cfg: GenConfig, priors: np.ndarray) -> LabeledClip:
    rng = RngStream(cfg.seed, (CLIP_STREAM, i))
    label = int(rng.gen.choice(cfg.classes, p=priors))
    values = render_clip(label, cfg, rng)
    return LabeledClip(Clip(values), label, f"clip{i:06d}", label)


def flip_labels(labels, noise: float, rng: RngStream, classes: int) -> np.ndarray:
    """Replace each label with probability ``noise`` by a uniform draw over the other classes."""
    if not (0 <= noise < 1):
        raise ConfigError("label noise rate must lie in [0, 1)")
    labels = np.asarray(labels, dtype=np.int64)
    flip = rng.gen.random(len(labels)) < noise
    offset = rng.gen.integers(1, classes, size=len(labels))
    return np.where(flip, (labels + offset) % classes, labels)


def generate_dataset(cfg: GenConfig) -> list[LabeledClip]:
    """Deterministic synthetic dataset; every clip draws from its own stream."""
    cfg.validate()
    priors = class_priors(cfg.classes, cfg.imbalance)
    workers = min(worker_count(), cfg.clips)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            clips = list(pool.map(lambda i: _make_clip(i, cfg, priors), range(cfg.clips)))
    else:
        clips = [_make_clip(i, cfg, priors) for i in range(cfg.clips)]
    noisy = flip_labels([c.clean_label for c in clips], cfg.noise, RngStream(cfg.seed, NOISE_STREAM), cfg.classes)
    for c, y in zip(clips, noisy):
        c.label = int(y)
    return clips


# -- file format ----------------------------------------------------------------

def encode_clip(item: LabeledClip) -> bytes:
    values = np.ascontiguousarray(item.clip.values, dtype="<f4")
    p, c, h, w = values.shape
    if not (0 <= item.label < 2**16):
        raise ValueError("label does not fit in u16")
    return HEADER.pack(MAGIC, VERSION, p, c, h, w, item.label) + values.tobytes()


def decode_clip(buf: bytes, clip_id: str = "") -> LabeledClip:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError("bad magic")
    if len(buf) < HEADER.size:
        raise TruncatedPayloadError("truncated payload: incomplete header")
    _, version, p, c, h, w, label = HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if min(p, c, h, w) == 0:
        raise ClipFormatError("zero extent in header")
    n = p * c * h * w
    if n > MAX_ELEMENTS:
        raise DimensionOverflowError(f"dimension overflow: {p}x{c}x{h}x{w} elements")
    body = len(buf) - HEADER.size
    if body < 4 * n:
        raise TruncatedPayloadError(f"truncated payload: {body} of {4 * n} bytes")
    if body > 4 * n:
        raise ClipFormatError(f"{body - 4 * n} trailing bytes after payload")
    values = np.frombuffer(buf, dtype="<f4", count=n, offset=HEADER.size).reshape(p, c, h, w)
    return LabeledClip(Clip(values.astype(np.float32)), int(label), clip_id)


def write_clip(item: LabeledClip, path: str | Path) -> None:
    Path(path).write_bytes(encode_clip(item))


def read_clip(path: str | Path) -> LabeledClip:
    path = Path(path)
    return decode_clip(path.read_bytes(), path.stem)


def write_dataset(clips: list[LabeledClip], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    with open(out / MANIFEST, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["clip_id", "path", "label", "clean_label"])
        for item in clips:
            rel = f"clips/{item.clip_id}.vclp"
            write_clip(item, out / rel)
            writer.writerow([item.clip_id, rel, item.label, item.clean_label])
    return out / MANIFEST


def read_dataset(data_dir: str | Path) -> list[LabeledClip]:
    root = Path(data_dir)
    items = []
    with open(root / MANIFEST, newline="") as fh:
        for row in csv.DictReader(fh):
            item = read_clip(root / row["path"])
            if item.label != int(row["label"]):
                raise ClipFormatError(f"{row['path']}: label disagrees with manifest")
            item.clip_id = row["clip_id"]
            clean = row.get("clean_label")
            item.clean_label = int(clean) if clean not in (None, "") else item.label
            items.append(item)
    if not items:
        raise ClipFormatError(f"{root / MANIFEST} lists no clips")
    return items
