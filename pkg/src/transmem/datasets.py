"""Procedural video datasets and their on-disk format.

Two generators stand in for real benchmarks:

* moving glyphs: 1-3 seven-segment style sprites bouncing around the frame,
  the flying-digits analogue;
* advecting blobs: Gaussian intensity cells drifting along a smooth periodic
  velocity field, the radar-echo analogue, with an ``aridity`` knob that
  makes a fraction of the sequences almost empty.

Every sequence is a pure function of ``(seed, split, index)``; the random
stream is Philox keyed by ``(seed, split_base + index)`` so bytes are
identical on every platform and splits never share a sequence.
"""
import io
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, FormatError

DATASET_MAGIC = b"TMUD"
DATASET_VERSION = 1
SPLIT_BASE = {"train": 0, "val": 1 << 40, "test": 2 << 40}
# 20 dBZ on a 0..70 dBZ scale
DEFAULT_CSI_THRESHOLD = 20.0 / 70.0

# segments: top, upper-left, upper-right, middle, lower-left, lower-right, bottom
_DIGIT_SEGMENTS = [
    "1110111", "0010010", "1011101", "1011011", "0111010",
    "1101011", "1101111", "1010010", "1111111", "1111011",
]
# extra non-digit sprites drawn from the same segment vocabulary
_EXTRA_SEGMENTS = ["1111110", "0101101", "1001001"]
NUM_GLYPHS = len(_DIGIT_SEGMENTS) + len(_EXTRA_SEGMENTS)


@dataclass
class Dataset:
    frames: np.ndarray  # (N, T, P, H, W) in [0, 1]
    input_len: int
    predict_len: int
    generator: str = "custom"
    seed: int = 0
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)  # generator trajectories; not persisted

    def __post_init__(self):
        if self.frames.ndim != 5:
            raise ConfigError(f"dataset frames must be (N, T, P, H, W), got {self.frames.shape}")
        if self.frames.shape[1] != self.input_len + self.predict_len:
            raise ConfigError(
                f"sequence length {self.frames.shape[1]} != input_len {self.input_len} + "
                f"predict_len {self.predict_len}")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def frame_shape(self):
        return self.frames.shape[2:]

    def subset(self, fraction):
        """Leading ``fraction`` of the sequences (at least one)."""
        if not 0 < fraction <= 1:
            raise ConfigError(f"subset fraction must be in (0, 1], got {fraction}")
        n = max(1, int(round(len(self) * fraction)))
        return Dataset(self.frames[:n], self.input_len, self.predict_len, self.generator,
                       self.seed, dict(self.config, subset_fraction=fraction))


def _rng(seed, split, index):
    if split not in SPLIT_BASE:
        raise ConfigError(f"unknown split {split!r}")
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), SPLIT_BASE[split] + index]))


# -- moving glyphs ----------------------------------------------------------------

def glyph_bitmap(glyph_id, extent):
    """Binary ``extent x extent`` sprite for glyph ``glyph_id``."""
    segs = (_DIGIT_SEGMENTS + _EXTRA_SEGMENTS)[glyph_id % NUM_GLYPHS]
    e = extent
    t = max(1, e // 4)  # stroke width
    mid = (e - t) // 2
    img = np.zeros((e, e))
    lo, hi = 0, e - 1
    if segs[0] == "1":
        img[0:t, :] = 1
    if segs[1] == "1":
        img[0:mid + t, 0:t] = 1
    if segs[2] == "1":
        img[0:mid + t, e - t:] = 1
    if segs[3] == "1":
        img[mid:mid + t, :] = 1
    if segs[4] == "1":
        img[mid:, 0:t] = 1
    if segs[5] == "1":
        img[mid:, e - t:] = 1
    if segs[6] == "1":
        img[hi - t + 1:hi + 1, lo:] = 1
    return img


def default_glyph_size(size):
    return max(3, size // 2)


def _reflect(pos, vel, limit):
    for ax in range(2):
        if pos[ax] < 0:
            pos[ax] = -pos[ax]
            vel[ax] = -vel[ax]
        elif pos[ax] > limit:
            pos[ax] = 2 * limit - pos[ax]
            vel[ax] = -vel[ax]


def moving_glyph_sequence(rng, num_glyphs, size, seq_len, glyph_size, speed_band,
                          positions=None, velocities=None, glyph_ids=None):
    limit = size - glyph_size
    ids = rng.integers(0, NUM_GLYPHS, size=num_glyphs) if glyph_ids is None else np.asarray(glyph_ids)
    pos = rng.uniform(0, limit, size=(num_glyphs, 2))
    angle = rng.uniform(0, 2 * np.pi, size=num_glyphs)
    speed = rng.uniform(speed_band[0], speed_band[1], size=num_glyphs)
    vel = np.stack([speed * np.sin(angle), speed * np.cos(angle)], axis=1)  # (dy, dx)
    if positions is not None:
        pos = np.array(positions, dtype=np.float64)
    if velocities is not None:
        vel = np.array(velocities, dtype=np.float64)
    sprites = [glyph_bitmap(int(i), glyph_size) for i in ids]
    frames = np.zeros((seq_len, 1, size, size))
    traj_pos = np.zeros((seq_len, num_glyphs, 2))
    traj_vel = np.zeros((seq_len, num_glyphs, 2))
    for t in range(seq_len):
        for g in range(num_glyphs):
            y, x = np.rint(pos[g]).astype(int)
            region = frames[t, 0, y:y + glyph_size, x:x + glyph_size]
            np.maximum(region, sprites[g], out=region)
            traj_pos[t, g] = pos[g]
            traj_vel[t, g] = vel[g]
            pos[g] += vel[g]
            _reflect(pos[g], vel[g], limit)
    return frames, traj_pos, traj_vel


def gen_moving_glyphs(seed, num_glyphs, count, size=32, seq_len=20, input_len=10, glyph_size=None,
                      speed_band=(1.0, 2.0), split="train", positions=None, velocities=None,
                      glyph_ids=None):
    """Moving-glyphs dataset of ``count`` sequences.

    ``positions``, ``velocities`` and ``glyph_ids`` override the random draws
    for every sequence (per-glyph ``(y, x)`` top-left corners and per-frame
    ``(dy, dx)`` steps); they exist for tests.
    """
    if num_glyphs not in (1, 2, 3):
        raise ConfigError(f"num_glyphs must be 1, 2 or 3, got {num_glyphs}")
    glyph_size = default_glyph_size(size) if glyph_size is None else glyph_size
    if 2 * glyph_size > size:
        raise ConfigError(f"glyph extent {glyph_size} too large for {size}x{size} frames (need size >= 2x glyph)")
    if not 0 < input_len < seq_len:
        raise ConfigError(f"input_len must be in (0, {seq_len}), got {input_len}")
    frames = np.zeros((count, seq_len, 1, size, size))
    traj_pos = np.zeros((count, seq_len, num_glyphs, 2))
    traj_vel = np.zeros((count, seq_len, num_glyphs, 2))
    for i in range(count):
        frames[i], traj_pos[i], traj_vel[i] = moving_glyph_sequence(
            _rng(seed, split, i), num_glyphs, size, seq_len, glyph_size, speed_band,
            positions, velocities, glyph_ids)
    config = {"num_glyphs": num_glyphs, "count": count, "size": size, "seq_len": seq_len,
              "input_len": input_len, "predict_len": seq_len - input_len, "glyph_size": glyph_size, "speed_band": list(speed_band),
              "split": split}
    return Dataset(frames, input_len, seq_len - input_len, "moving_glyphs", seed, config,
                   {"positions": traj_pos, "velocities": traj_vel})


# -- advecting blobs --------------------------------------------------------------

def _wrapped_offsets(coord, size):
    grid = np.arange(size)
    return (grid - coord + size / 2) % size - size / 2


def render_blobs(centers, sigmas, peaks, size):
    """Sum of periodic Gaussian blobs, clipped to [0, 1]."""
    field = np.zeros((size, size))
    for (cy, cx), s, p in zip(centers, sigmas, peaks):
        dy = _wrapped_offsets(cy, size)
        dx = _wrapped_offsets(cx, size)
        field += p * np.outer(np.exp(-dy ** 2 / (2 * s * s)), np.exp(-dx ** 2 / (2 * s * s)))
    return np.clip(field, 0.0, 1.0)


def advecting_blob_sequence(rng, size, seq_len, aridity, max_blobs, decay, threshold):
    scale = size / 32.0
    empty = rng.random() < aridity
    n = int(rng.integers(1, max_blobs + 1))
    centers = rng.uniform(0, size, size=(n, 2))
    sigmas = rng.uniform(1.5, 3.5, size=n) * scale
    if empty:
        peaks = rng.uniform(0.0, 0.5 * threshold, size=n) / n
    else:
        peaks = rng.uniform(0.35, 0.65, size=n)
    growth = rng.uniform(-0.03, 0.03, size=n) if decay else np.zeros(n)
    angle = rng.uniform(0, 2 * np.pi)
    drift = rng.uniform(0.5, 1.5) * scale * np.array([np.sin(angle), np.cos(angle)])
    swirl = rng.uniform(0.0, 0.5) * scale
    phase = rng.uniform(0, 2 * np.pi, size=2)
    frames = np.zeros((seq_len, 1, size, size))
    for t in range(seq_len):
        frames[t, 0] = render_blobs(centers, sigmas, peaks, size)
        vy = drift[0] + swirl * np.sin(2 * np.pi * centers[:, 1] / size + phase[0])
        vx = drift[1] + swirl * np.sin(2 * np.pi * centers[:, 0] / size + phase[1])
        centers = (centers + np.stack([vy, vx], axis=1)) % size
        peaks = peaks * (1.0 + growth)
    return frames, empty


def gen_advecting_blobs(seed, count, size=32, seq_len=20, input_len=10, aridity=0.5, max_blobs=3,
                        decay=True, threshold=DEFAULT_CSI_THRESHOLD, split="train"):
    """Advecting-blobs dataset. A sequence is near-empty (max intensity below
    ``threshold``) with probability ``aridity``."""
    if not 0.0 <= aridity <= 1.0:
        raise ConfigError(f"aridity must be in [0, 1], got {aridity}")
    if max_blobs < 1:
        raise ConfigError("max_blobs must be >= 1")
    if not 0 < input_len < seq_len:
        raise ConfigError(f"input_len must be in (0, {seq_len}), got {input_len}")
    frames = np.zeros((count, seq_len, 1, size, size))
    empty = np.zeros(count, dtype=bool)
    for i in range(count):
        frames[i], empty[i] = advecting_blob_sequence(_rng(seed, split, i), size, seq_len, aridity,
                                                      max_blobs, decay, threshold)
    config = {"count": count, "size": size, "seq_len": seq_len, "input_len": input_len,
              "predict_len": seq_len - input_len, "aridity": aridity, "max_blobs": max_blobs, "decay": decay, "threshold": threshold,
              "split": split}
    return Dataset(frames, input_len, seq_len - input_len, "advecting_blobs", seed, config,
                   {"near_empty": empty})


GENERATORS = {"moving_glyphs": gen_moving_glyphs, "advecting_blobs": gen_advecting_blobs}


# -- file format ----------------------------------------------------------------------

def _put_str(buf, s):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _get_str(buf, what):
    (n,) = struct.unpack("<I", tc._read_exact(buf, 4, what))
    return tc._read_exact(buf, n, what).decode("utf-8")


def dataset_to_bytes(ds):
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<I", DATASET_VERSION))
    _put_str(buf, ds.generator)
    buf.write(struct.pack("<Q", int(ds.seed) & (2**64 - 1)))
    cfg = dict(ds.config, input_len=ds.input_len, predict_len=ds.predict_len)
    _put_str(buf, json.dumps(cfg, sort_keys=True))
    tc.write_tensor(buf, ds.frames)
    return buf.getvalue()


def dataset_from_bytes(data):
    buf = io.BytesIO(data)
    magic = tc._read_exact(buf, 4, "dataset header")
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r} (expected {DATASET_MAGIC!r} for a dataset file)")
    (version,) = struct.unpack("<I", tc._read_exact(buf, 4, "dataset header"))
    if version != DATASET_VERSION:
        raise FormatError(f"dataset file version {version} does not match reader version {DATASET_VERSION}")
    generator = _get_str(buf, "generator name")
    (seed,) = struct.unpack("<Q", tc._read_exact(buf, 8, "seed"))
    config = json.loads(_get_str(buf, "config"))
    frames = tc.read_tensor(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after dataset frames")
    return Dataset(frames, config["input_len"], config["predict_len"], generator, seed, config)


def atomic_write(path, data):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_dataset(path, ds):
    atomic_write(path, dataset_to_bytes(ds))


def read_dataset(path):
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
