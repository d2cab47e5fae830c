"""
MAM-FSD Data
Synthetic gloss videos, the on-disk dataset, training augmentations and motion maps

Every random choice for a sample is addressed by (seed, split, index) through
the position-as-seed hash, so generation is order independent.
"""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .base import (ConfigError, DataError, FormatError, ShapeError, derive_rng, hash_to_index,
                   load_profile, sample_hash)
from .config import DataConfig
from .serialization import load_tensor, save_tensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SYNTH_FIELDS = {"name", "description", "version", "gloss_profile", "vocab_size", "splits",
                "label_length", "duration", "resolution", "crossfade"}
SYNTH_REQUIRED = ("vocab_size", "splits", "label_length", "duration", "resolution")
SPLIT_ORDER = ("train", "dev", "test")
TOTAL_STRIDE = 8

# ============================================================================
# VOCABULARY AND GENERATION SPEC
# ============================================================================


@dataclass(frozen=True)
class GlossVocab:
    """Motion primitives (gloss id k is ``glosses[k - 1]``) plus appearance pools."""

    glosses: Tuple[dict, ...]
    pools: dict
    motion: dict

    @classmethod
    def load(cls, profile: str = "gloss_default.json", size: Optional[int] = None) -> "GlossVocab":
        try:
            data = load_profile(profile, required=("glosses", "pools", "motion"))
        except (FileNotFoundError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        glosses = tuple(data["glosses"])
        if size is not None:
            if not 1 <= size <= len(glosses):
                raise ConfigError(f"vocab_size {size} outside 1..{len(glosses)} for profile {profile}")
            glosses = glosses[:size]
        return cls(glosses=glosses, pools=data["pools"], motion=data["motion"])

    @property
    def size(self) -> int:
        return len(self.glosses)

    @property
    def names(self) -> List[str]:
        return [g["name"] for g in self.glosses]


@dataclass(frozen=True)
class SynthSpec:
    vocab_size: int = 10
    splits: Tuple[Tuple[str, int], ...] = (("train", 400), ("dev", 50), ("test", 50))
    label_length: Tuple[int, int] = (2, 5)
    duration: Tuple[int, int] = (8, 16)
    resolution: int = 40
    crossfade: int = 2
    gloss_profile: str = "gloss_default.json"

    @classmethod
    def from_profile(cls, profile: PathLike = "synth_default.json") -> "SynthSpec":
        try:
            data = load_profile(str(profile), required=SYNTH_REQUIRED)
        except (FileNotFoundError, ValueError, json.JSONDecodeError) as exc:
            raise ConfigError(f"bad generation spec: {exc}") from None
        unknown = sorted(set(data) - SYNTH_FIELDS)
        if unknown:
            raise ConfigError(f"unknown generation spec keys: {', '.join(unknown)}")
        try:
            spec = cls(
                vocab_size=int(data["vocab_size"]),
                splits=tuple((str(k), int(v)) for k, v in data["splits"].items()),
                label_length=tuple(int(v) for v in data["label_length"]),
                duration=tuple(int(v) for v in data["duration"]),
                resolution=int(data["resolution"]),
                crossfade=int(data.get("crossfade", 2)),
                gloss_profile=str(data.get("gloss_profile", "gloss_default.json")),
            )
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"bad generation spec value: {exc}") from None
        spec.validate()
        return spec

    def validate(self) -> None:
        lo, hi = self.label_length
        if not 1 <= lo <= hi:
            raise ConfigError(f"label_length range {self.label_length} is empty")
        if hi > 1 and self.vocab_size < 2:
            raise ConfigError("labels longer than one gloss need at least 2 glosses (no immediate repeats)")
        d_lo, d_hi = self.duration
        if not 1 <= d_lo <= d_hi:
            raise ConfigError(f"duration range {self.duration} is empty")
        if self.resolution < TOTAL_STRIDE or self.resolution % TOTAL_STRIDE:
            raise ConfigError(f"resolution {self.resolution} is not divisible by {TOTAL_STRIDE}")
        if self.crossfade < 0 or self.crossfade >= d_lo:
            raise ConfigError(f"crossfade {self.crossfade} must lie in 0..{d_lo - 1}")
        for name, count in self.splits:
            if count < 0:
                raise ConfigError(f"split {name} has a negative sample count")


@dataclass
class Sample:
    """One generated sentence. ``segments`` are diagnostics only, never training input."""

    id: str
    video: np.ndarray                       # [T, 3, H, W] in [0, 1]
    label: Tuple[int, ...]
    segments: Tuple[Tuple[int, int], ...]   # per-gloss [start, end) frame ranges


# ============================================================================
# RENDERING
# ============================================================================

def _appearance(vocab: GlossVocab, seed: int, split_idx: int, index: int) -> Tuple[np.ndarray, float, float]:
    pools = vocab.pools
    color = pools["color"][hash_to_index(sample_hash(seed, split_idx, index, 1), len(pools["color"]))]
    background = pools["background"][hash_to_index(sample_hash(seed, split_idx, index, 2), len(pools["background"]))]
    radius = pools["radius"][hash_to_index(sample_hash(seed, split_idx, index, 3), len(pools["radius"]))]
    return np.asarray(color, dtype=np.float64), float(background), float(radius)


def gloss_start(vocab: GlossVocab, gloss_id: int, rng: np.random.Generator, size: int) -> Tuple[float, float]:
    """Start position that keeps the whole primitive inside a ``size`` frame."""
    gloss = vocab.glosses[gloss_id - 1]
    jitter = vocab.motion["jitter"]
    center = np.full(2, size / 2.0)
    if gloss["motion"] == "translate":
        center = center - np.asarray(gloss["direction"]) * vocab.motion["travel"] / 2.0
    y, x = center + rng.uniform(-jitter, jitter, size=2)
    return float(y), float(x)


def render_gloss(vocab: GlossVocab, gloss_id: int, duration: int, start: Tuple[float, float],
                 color: np.ndarray, background: float, radius: float, size: int) -> np.ndarray:
    """Pure rendering of one primitive: [duration, 3, size, size] in [0, 1]."""
    gloss = vocab.glosses[gloss_id - 1]
    motion = vocab.motion
    kind = gloss["motion"]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    frames = np.empty((duration, 3, size, size), dtype=np.float64)
    s_lo, s_hi = motion["scale_range"]
    for t in range(duration):
        p = t / (duration - 1) if duration > 1 else 0.0
        cy, cx = start
        r = radius
        visible = 1.0
        if kind == "translate":
            dy, dx = gloss["direction"]
            cy, cx = cy + dy * motion["travel"] * p, cx + dx * motion["travel"] * p
        elif kind == "orbit":
            theta = 2.0 * math.pi * t / duration
            cy, cx = cy + motion["orbit_radius"] * math.sin(theta), cx + motion["orbit_radius"] * math.cos(theta)
        elif kind == "expand":
            r = radius * (s_lo + (s_hi - s_lo) * p)
        elif kind == "contract":
            r = radius * (s_hi - (s_hi - s_lo) * p)
        elif kind == "blink":
            visible = 1.0 if (t // motion["blink_period"]) % 2 == 0 else 0.0
        else:
            raise ConfigError(f"unknown motion primitive: {kind}")
        blob = visible * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * r * r))
        frames[t] = background + (color[:, None, None] - background) * blob[None]
    return np.clip(frames, 0.0, 1.0)


def _draw_label(rng: np.random.Generator, spec: SynthSpec) -> Tuple[int, ...]:
    length = int(rng.integers(spec.label_length[0], spec.label_length[1] + 1))
    label: List[int] = []
    for _ in range(length):
        gloss = int(rng.integers(1, spec.vocab_size + 1))
        # identical neighbours would render as one long gloss
        while label and gloss == label[-1]:
            gloss = int(rng.integers(1, spec.vocab_size + 1))
        label.append(gloss)
    return tuple(label)


def compose_sample(vocab: GlossVocab, spec: SynthSpec, seed: int, split_idx: int, index: int,
                   sample_id: str = "") -> Sample:
    """Deterministic sample from (seed, split, index); glosses joined by a short cross-fade."""
    rng = derive_rng(seed, split_idx, index)
    color, background, radius = _appearance(vocab, seed, split_idx, index)
    label = _draw_label(rng, spec)
    pieces, segments, cursor = [], [], 0
    for k, gloss in enumerate(label):
        duration = int(rng.integers(spec.duration[0], spec.duration[1] + 1))
        start = gloss_start(vocab, gloss, rng, spec.resolution)
        segment = render_gloss(vocab, gloss, duration, start, color, background, radius, spec.resolution)
        if k > 0:
            last = pieces[-1][-1]
            for j in range(min(spec.crossfade, duration)):
                w = (j + 1) / (spec.crossfade + 1)
                segment[j] = (1.0 - w) * last + w * segment[j]
        pieces.append(segment)
        segments.append((cursor, cursor + duration))
        cursor += duration
    video = np.concatenate(pieces, axis=0).astype(np.float32)
    return Sample(id=sample_id, video=video, label=label, segments=tuple(segments))


# ============================================================================
# DATASET ON DISK
# ============================================================================

@dataclass(frozen=True)
class SampleRecord:
    id: str
    video_path: Path
    frames: int
    label: Tuple[int, ...]


def _write_lines(path: Path, lines: Sequence[str]) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.writelines(line + "\n" for line in lines)


def synth_generate(spec: SynthSpec, out_dir: PathLike, seed: int, threads: int = 1) -> Dict[str, int]:
    """
    Write manifest.tsv, segments.tsv and videos/*.mft per split plus dataset.json.

    Returns the sample count per split.

    Raises:
        DataError: output path cannot be written
    """
    spec.validate()
    vocab = GlossVocab.load(spec.gloss_profile, spec.vocab_size)
    root = Path(out_dir)
    counts: Dict[str, int] = {}
    try:
        root.mkdir(parents=True, exist_ok=True)
        for split_idx, (split, count) in enumerate(spec.splits):
            videos = root / split / "videos"
            videos.mkdir(parents=True, exist_ok=True)

            def build(index: int, split=split, split_idx=split_idx, videos=videos) -> Sample:
                sample = compose_sample(vocab, spec, seed, split_idx, index, f"{split}_{index:05d}")
                save_tensor(videos / f"{sample.id}.mft", sample.video)
                return sample

            with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
                samples = list(pool.map(build, range(count)))

            _write_lines(root / split / "manifest.tsv", [
                f"{s.id}\tvideos/{s.id}.mft\t{s.video.shape[0]}\t{' '.join(map(str, s.label))}"
                for s in samples])
            _write_lines(root / split / "segments.tsv", [
                f"{s.id}\t{gloss}\t{start}\t{end}"
                for s in samples for gloss, (start, end) in zip(s.label, s.segments)])
            counts[split] = count
            logger.info("generated %d %s samples", count, split)

        info = {
            "name": "mamfsd synthetic glosses",
            "version": "1.0.0",
            "seed": seed,
            "vocab_size": spec.vocab_size,
            "resolution": spec.resolution,
            "gloss_names": vocab.names,
            "splits": counts,
        }
        (root / "dataset.json").write_text(json.dumps(info, indent=2) + "\n", encoding='utf-8')
    except OSError as exc:
        raise DataError(f"cannot write dataset to {root}: {exc}") from None
    return counts


def load_dataset_info(root: PathLike) -> dict:
    path = Path(root) / "dataset.json"
    if not path.exists():
        raise DataError(f"no dataset.json under {root}")
    try:
        return json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None


def load_split(root: PathLike, split: str) -> List[SampleRecord]:
    """Manifest entries of one split (labels and frame counts, no segment boundaries)."""
    manifest = Path(root) / split / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"missing manifest {manifest}")
    records = []
    for n, line in enumerate(manifest.read_text(encoding='utf-8').splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            sample_id, rel, frames, label = parts
            records.append(SampleRecord(sample_id, manifest.parent / rel, int(frames),
                                        tuple(int(g) for g in label.split())))
        except ValueError:
            raise DataError(f"{manifest}:{n}: malformed manifest line") from None
    return records


def load_segments(root: PathLike, split: str) -> Dict[str, List[Tuple[int, int, int]]]:
    """Diagnostics only: per-sample (gloss, start, end) ground-truth segments."""
    segments: Dict[str, List[Tuple[int, int, int]]] = {}
    path = Path(root) / split / "segments.tsv"
    for line in path.read_text(encoding='utf-8').splitlines():
        sample_id, gloss, start, end = line.split("\t")
        segments.setdefault(sample_id, []).append((int(gloss), int(start), int(end)))
    return segments


def read_video(record: SampleRecord) -> np.ndarray:
    try:
        video = load_tensor(record.video_path)
    except (OSError, FormatError) as exc:
        raise DataError(f"{record.id}: {exc}") from None
    if video.ndim != 4 or video.shape[0] != record.frames or video.shape[1] != 3:
        raise DataError(f"{record.id}: video dims {list(video.shape)} do not match the manifest")
    return video


# ============================================================================
# AUGMENTATION
# ============================================================================

@dataclass(frozen=True)
class AugmentParams:
    top: int
    left: int
    flip: bool
    factor: float


def crop_size(resolution: int, ratio: float, multiple: int = TOTAL_STRIDE) -> int:
    """Largest multiple of ``multiple`` not above ratio * resolution (40 x 0.875 -> 32)."""
    size = int(math.floor(resolution * ratio + 1e-9))
    return size - size % multiple


def stretch_length(frames: int, factor: float, lo: float = 0.8, hi: float = 1.2) -> int:
    shortest = max(1, math.ceil(lo * frames - 1e-9))
    longest = max(shortest, math.floor(hi * frames + 1e-9))
    return min(max(int(math.floor(factor * frames + 0.5)), shortest), longest)


def stretch_indices(frames: int, new_frames: int) -> np.ndarray:
    """Nearest source frame for each output frame: round(t' * T / T'), clamped."""
    t = np.arange(new_frames, dtype=np.float64)
    return np.minimum(np.floor(t * frames / new_frames + 0.5).astype(np.int64), frames - 1)


def temporal_stretch(video: np.ndarray, factor: float, lo: float = 0.8, hi: float = 1.2) -> np.ndarray:
    frames = video.shape[0]
    return video[stretch_indices(frames, stretch_length(frames, factor, lo, hi))]


def sample_augment(shape: Tuple[int, ...], size: int, rng: np.random.Generator,
                   config: DataConfig = DataConfig()) -> AugmentParams:
    _, _, h, w = shape
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    flip = bool(rng.random() < config.flip_prob)
    factor = float(rng.uniform(config.stretch_min, config.stretch_max))
    return AugmentParams(top=top, left=left, flip=flip, factor=factor)


def apply_augment(video: np.ndarray, params: AugmentParams, size: int,
                  config: DataConfig = DataConfig()) -> np.ndarray:
    out = video[:, :, params.top:params.top + size, params.left:params.left + size]
    if params.flip:
        out = out[..., ::-1]
    out = temporal_stretch(out, params.factor, config.stretch_min, config.stretch_max)
    return np.ascontiguousarray(out, dtype=np.float32)


def augment(video: np.ndarray, mode: str, rng: Optional[np.random.Generator] = None,
            config: DataConfig = DataConfig(), size: Optional[int] = None) -> np.ndarray:
    """
    train: random crop, whole-sequence horizontal flip, nearest-frame temporal stretch.
    eval:  center crop only.
    """
    if video.ndim != 4:
        raise ShapeError(f"video must be [T, C, H, W], got {list(video.shape)}")
    _, _, h, w = video.shape
    size = size or crop_size(min(h, w), config.crop_ratio)
    if size <= 0 or size > h or size > w:
        raise ShapeError(f"crop {size} does not fit {h}x{w} frames")
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode augmentation needs an rng")
        return apply_augment(video, sample_augment(video.shape, size, rng, config), size, config)
    if mode == "eval":
        top, left = (h - size) // 2, (w - size) // 2
        return np.ascontiguousarray(video[:, :, top:top + size, left:left + size], dtype=np.float32)
    raise ValueError(f"unknown augmentation mode: {mode}")


# ============================================================================
# MOTION MAPS AND EXPORT
# ============================================================================

def frame_difference_map(video: np.ndarray) -> np.ndarray:
    """D_t = mean_c |x_{t+1} - x_t|, scaled by the global maximum into [0, 1]."""
    if video.ndim != 4 or video.shape[0] < 2:
        raise ShapeError(f"frame difference needs [T >= 2, C, H, W], got {list(video.shape)}")
    v = video.astype(np.float64)
    diff = np.abs(v[1:] - v[:-1]).mean(axis=1)
    peak = diff.max()
    if peak > 0:
        diff = diff / peak
    return diff


def upsample_nearest(image: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(image, factor, axis=-2), factor, axis=-1)


def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] -> 0..255 with round-half-up."""
    return np.clip(np.floor(255.0 * np.asarray(values, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path: PathLike, image: np.ndarray) -> None:
    """Binary greyscale PGM (P5) from a [0, 1] map."""
    pixels = quantize(image)
    h, w = pixels.shape
    with open(path, 'wb') as f:
        f.write(f"P5\n{w} {h}\n255\n".encode('ascii'))
        f.write(pixels.tobytes())


def default_threads() -> int:
    """Worker cap from MAMFSD_THREADS (default 1)."""
    raw = os.environ.get("MAMFSD_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"MAMFSD_THREADS must be an integer, got {raw!r}") from None
