"""Deterministic synthetic multi-speaker clip generator.

Stands in for real lip-reading corpora at desk scale: each "speaker" renders
the same glyph vocabulary through their own appearance transform (rotation,
scale, shift, contrast, a smooth intensity bias field, and sensor noise), so
a model pretrained on one set of speakers measurably degrades on held-out
speakers — the mismatch that padding adaptation then closes.

Clips are ``[T, 1, H, W]`` grayscale in [0, 1].  The label is the glyph
identity (classification) or the left-to-right glyph token sequence
(sequence transcription).  Everything derives from ``(seed, speaker_id,
clip_index)`` through dedicated RNG streams, so datasets are bitwise
reproducible and individual clips can be re-rendered in isolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .adapt import AdaptBudget
from .errors import ConfigError, ContractError, DataError
from .model import TASK_CLASSIFICATION, TASK_CTC
from .seeding import stable_rng
from .udtf import read_udtf, write_udtf

# 5x7 dot-matrix glyphs; '#' is ink.  Order fixes the class indexing.
_FONT = [
    ("0", ".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    ("1", "..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    ("2", ".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    ("3", ".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."),
    ("4", "...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    ("5", "#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    ("6", ".###.", "#....", "####.", "#...#", "#...#", "#...#", ".###."),
    ("7", "#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    ("8", ".###.", "#...#", ".###.", "#...#", "#...#", "#...#", ".###."),
    ("9", ".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."),
    ("A", ".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    ("C", ".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."),
    ("E", "#####", "#....", "####.", "#....", "#....", "#....", "#####"),
    ("F", "#####", "#....", "####.", "#....", "#....", "#....", "#...."),
    ("H", "#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    ("L", "#....", "#....", "#....", "#....", "#....", "#....", "#####"),
]
MAX_VOCAB = len(_FONT)
_GLYPH_SCALE = 2  # dot-matrix cell -> pixels


@dataclass(frozen=True)
class DataConfig:
    """Generator knobs; the defaults are the calibrated reference setting."""

    task: str = TASK_CLASSIFICATION
    num_speakers: int = 10
    holdout: tuple = ("s08", "s09")
    vocab_size: int = 12
    frames: int = 8
    height: int = 32
    width: int = 32
    clips_per_speaker: int = 64
    eval_clips_per_speaker: int = 16
    adapt_pool: int = 120
    test_clips: int = 40
    tokens_per_clip: int = 2
    clip_seconds: float = 3.0
    seed: int = 0
    dtype: str = "f32"
    # style strengths (the speaker mismatch)
    style_rotation: float = 0.25
    style_scale: float = 0.15
    style_shift: float = 2.6
    style_contrast: float = 0.25
    style_bias: float = 0.18
    style_noise: float = 0.04

    def speaker_ids(self) -> list:
        return [f"s{i:02d}" for i in range(self.num_speakers)]

    def train_speakers(self) -> list:
        return [s for s in self.speaker_ids() if s not in self.holdout]

    def numpy_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32


def validate_data_config(cfg: DataConfig) -> None:
    if cfg.task not in (TASK_CLASSIFICATION, TASK_CTC):
        raise ConfigError(f"unknown task {cfg.task!r}")
    if not (2 <= cfg.vocab_size <= MAX_VOCAB):
        raise ConfigError(f"vocab_size must lie in [2, {MAX_VOCAB}], got {cfg.vocab_size}")
    ids = set(cfg.speaker_ids())
    if not set(cfg.holdout) <= ids:
        raise ConfigError(f"holdout {cfg.holdout} not among generated speakers")
    if len(cfg.holdout) >= cfg.num_speakers - 1:
        raise ConfigError("need at least two non-holdout speakers")
    glyph_h, glyph_w = 7 * _GLYPH_SCALE, 5 * _GLYPH_SCALE
    if glyph_h + 4 > cfg.height or glyph_w + 4 > cfg.width:
        raise ConfigError(
            f"{cfg.height}x{cfg.width} canvas too small for {glyph_h}x{glyph_w} glyphs"
        )
    if cfg.frames < 2:
        raise ConfigError("clips need at least 2 frames")
    if cfg.task == TASK_CTC:
        if cfg.tokens_per_clip < 1:
            raise ConfigError("sequence clips need at least one token")
        # worst case: all tokens identical needs a separating frame per repeat
        if 2 * cfg.tokens_per_clip - 1 > cfg.frames:
            raise ConfigError(
                f"{cfg.tokens_per_clip} tokens cannot fit in {cfg.frames} frames"
            )
    if cfg.dtype not in ("f32", "f64"):
        raise ConfigError(f"dtype must be f32 or f64, got {cfg.dtype}")
    if not (cfg.clip_seconds > 0):
        raise ConfigError("clip_seconds must be positive")


# ---------------------------------------------------------------------------
# speaker styles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpeakerStyle:
    """One speaker's deterministic appearance transform."""

    speaker_id: str
    rotation: float
    scale: float
    shift: tuple
    contrast: float
    brightness: float
    bias_field: np.ndarray
    noise: float


_STYLE_SEVERITY = 1.4  # norm of the 5-D style direction vector


def speaker_style(cfg: DataConfig, speaker_id: str) -> SpeakerStyle:
    rng = stable_rng(cfg.seed, "style", speaker_id)
    # every speaker sits at the same distance from the neutral transform, in a
    # random direction: the mismatch never hinges on one lucky or brutal draw
    direction = rng.normal(size=5)
    direction *= _STYLE_SEVERITY / np.linalg.norm(direction)
    rotation = float(direction[0] * cfg.style_rotation)
    scale = float(np.exp(direction[1] * cfg.style_scale))
    shift = (float(direction[2] * cfg.style_shift), float(direction[3] * cfg.style_shift))
    contrast = float(np.exp(direction[4] * cfg.style_contrast))
    brightness = float(rng.uniform(0.05, 0.2))
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, cfg.height), np.linspace(0.0, 1.0, cfg.width), indexing="ij"
    )
    bias = np.zeros((cfg.height, cfg.width))
    for _ in range(2):
        fy, fx = rng.integers(1, 3, size=2)
        py, px = rng.uniform(0.0, 2.0 * np.pi, size=2)
        bias += np.cos(2.0 * np.pi * fy * yy + py) * np.cos(2.0 * np.pi * fx * xx + px)
    amp = cfg.style_bias * float(rng.uniform(0.5, 1.0))
    bias *= amp / 2.0
    noise = float(rng.uniform(0.3, 1.0)) * cfg.style_noise
    return SpeakerStyle(
        speaker_id=speaker_id,
        rotation=rotation,
        scale=scale,
        shift=shift,
        contrast=contrast,
        brightness=brightness,
        bias_field=bias,
        noise=noise,
    )


def _style_matrix(style: SpeakerStyle, h: int, w: int):
    """Inverse-map matrix/offset for ndimage.affine_transform."""
    c, s = np.cos(style.rotation), np.sin(style.rotation)
    # output->input map: rotate by -theta and divide by scale, about center
    mat = np.array([[c, s], [-s, c]]) / style.scale
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - mat @ (center + np.asarray(style.shift))
    return mat, offset


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _glyph_canvas(token: int) -> np.ndarray:
    rows = _FONT[token][1:]
    bitmap = np.array([[ch == "#" for ch in row] for row in rows], dtype=np.float64)
    return np.kron(bitmap, np.ones((_GLYPH_SCALE, _GLYPH_SCALE)))


def _token_track(cfg: DataConfig, token: int, jitter_rng) -> np.ndarray:
    """Per-frame top-left glyph positions: a class-specific sweep."""
    glyph_h, glyph_w = 7 * _GLYPH_SCALE, 5 * _GLYPH_SCALE
    max_y, max_x = cfg.height - glyph_h - 1, cfg.width - glyph_w - 1
    angle = 2.0 * np.pi * token / max(cfg.vocab_size, 1)
    cy, cx = max_y / 2.0, max_x / 2.0
    ry, rx = max_y / 2.0 - 0.5, max_x / 2.0 - 0.5
    phases = np.linspace(-1.0, 1.0, cfg.frames)
    ys = cy + ry * phases * np.sin(angle)
    xs = cx + rx * phases * np.cos(angle)
    ys = ys + jitter_rng.uniform(-0.7, 0.7, size=cfg.frames)
    xs = xs + jitter_rng.uniform(-0.7, 0.7, size=cfg.frames)
    return np.stack(
        [np.clip(ys, 0, max_y).round(), np.clip(xs, 0, max_x).round()], axis=1
    ).astype(np.int64)


def _clip_tokens(cfg: DataConfig, label) -> list:
    if cfg.task == TASK_CLASSIFICATION:
        return [int(label)] * cfg.frames
    tokens = [int(t) - 1 for t in label]  # class index of each sequence token
    spans = np.array_split(np.arange(cfg.frames), len(tokens))
    out = []
    for tok, span in zip(tokens, spans):
        out.extend([tok] * len(span))
    return out


def render_clip(cfg: DataConfig, speaker_id: str, clip_index: int, label) -> np.ndarray:
    """One [T, 1, H, W] clip of the given label in the speaker's style."""
    style = speaker_style(cfg, speaker_id)
    rng = stable_rng(cfg.seed, "clip", speaker_id, clip_index)
    mat, offset = _style_matrix(style, cfg.height, cfg.width)
    frame_tokens = _clip_tokens(cfg, label)
    tracks = {tok: _token_track(cfg, tok, rng) for tok in dict.fromkeys(frame_tokens)}
    glyph_h, glyph_w = 7 * _GLYPH_SCALE, 5 * _GLYPH_SCALE
    frames = np.empty((cfg.frames, 1, cfg.height, cfg.width), dtype=np.float64)
    for t, tok in enumerate(frame_tokens):
        canvas = np.zeros((cfg.height, cfg.width))
        y, x = tracks[tok][t]
        canvas[y : y + glyph_h, x : x + glyph_w] = _glyph_canvas(tok)
        warped = ndimage.affine_transform(canvas, mat, offset=offset, order=1, mode="constant")
        img = style.brightness + style.bias_field + 0.75 * style.contrast * warped
        img = img + rng.normal(0.0, style.noise, size=img.shape)
        frames[t, 0] = np.clip(img, 0.0, 1.0)
    return frames.astype(cfg.numpy_dtype())


# ---------------------------------------------------------------------------
# labels and splits
# ---------------------------------------------------------------------------


def _label_cycle(cfg: DataConfig, speaker_id: str, purpose: str, count: int, classes) -> list:
    """Balanced shuffled labels: tile the allowed classes, then permute."""
    rng = stable_rng(cfg.seed, "labels", purpose, speaker_id)
    classes = list(classes)
    if cfg.task == TASK_CLASSIFICATION:
        pool = np.array(classes * (count // len(classes) + 1))[:count]
        return [int(v) for v in pool[rng.permutation(count)]]
    labels = []
    for _ in range(count):
        toks = rng.choice(np.asarray(classes), size=cfg.tokens_per_clip, replace=True)
        labels.append(tuple(int(t) + 1 for t in toks))  # tokens are 1-based; 0 is the gap
    return labels


def _adapt_classes(cfg: DataConfig, speaker_id: str) -> list:
    """Drop one class from a held-out speaker's adaptation pool, so the
    adaptation and test vocabularies overlap without coinciding."""
    rng = stable_rng(cfg.seed, "holdout-class", speaker_id)
    dropped = int(rng.integers(0, cfg.vocab_size))
    return [c for c in range(cfg.vocab_size) if c != dropped]


@dataclass
class ClipSet:
    """A labeled stack of clips plus each clip's speaker."""

    clips: np.ndarray
    labels: object
    speakers: list

    def __len__(self) -> int:
        return int(self.clips.shape[0])

    def subset(self, indices) -> "ClipSet":
        indices = np.asarray(indices, dtype=np.int64)
        if self.is_classification:
            labels = np.asarray(self.labels)[indices]
        else:
            labels = [self.labels[i] for i in indices]
        return ClipSet(
            clips=self.clips[indices],
            labels=labels,
            speakers=[self.speakers[i] for i in indices],
        )

    @property
    def is_classification(self) -> bool:
        return isinstance(self.labels, np.ndarray) or (
            len(self.labels) > 0 and not isinstance(self.labels[0], tuple)
        )


@dataclass
class DataSplit:
    """Pretraining pool plus per-held-out-speaker adaptation and test sets."""

    config: DataConfig
    train: ClipSet
    seen_eval: ClipSet
    adapt: dict
    test: dict

    @property
    def holdout_speakers(self) -> list:
        return list(self.config.holdout)

    @property
    def clip_seconds(self) -> float:
        return self.config.clip_seconds


def _speaker_set(cfg: DataConfig, speaker_id: str, purpose: str, count: int, classes, index_base: int) -> ClipSet:
    labels = _label_cycle(cfg, speaker_id, purpose, count, classes)
    clips = np.stack(
        [render_clip(cfg, speaker_id, index_base + i, labels[i]) for i in range(count)]
    )
    if cfg.task == TASK_CLASSIFICATION:
        labels = np.asarray(labels, dtype=np.int64)
    return ClipSet(clips=clips, labels=labels, speakers=[speaker_id] * count)


def _concat_sets(sets: Sequence[ClipSet], classification: bool) -> ClipSet:
    clips = np.concatenate([s.clips for s in sets])
    if classification:
        labels = np.concatenate([np.asarray(s.labels) for s in sets])
    else:
        labels = [lab for s in sets for lab in s.labels]
    speakers = [spk for s in sets for spk in s.speakers]
    return ClipSet(clips=clips, labels=labels, speakers=speakers)


def generate(cfg: DataConfig = DataConfig()) -> DataSplit:
    """Render the full dataset: train/seen-eval pools and per-held-out-speaker
    adaptation and test sets.  Bitwise deterministic in ``cfg``."""
    validate_data_config(cfg)
    is_cls = cfg.task == TASK_CLASSIFICATION
    all_classes = list(range(cfg.vocab_size))
    train_parts = []
    eval_parts = []
    for spk in cfg.train_speakers():
        train_parts.append(_speaker_set(cfg, spk, "train", cfg.clips_per_speaker, all_classes, 0))
        eval_parts.append(
            _speaker_set(
                cfg, spk, "seen-eval", cfg.eval_clips_per_speaker, all_classes,
                cfg.clips_per_speaker,
            )
        )
    adapt = {}
    test = {}
    for spk in cfg.holdout:
        classes = _adapt_classes(cfg, spk)
        adapt[spk] = _speaker_set(cfg, spk, "adapt", cfg.adapt_pool, classes, 0)
        test[spk] = _speaker_set(cfg, spk, "test", cfg.test_clips, all_classes, cfg.adapt_pool)
    return DataSplit(
        config=cfg,
        train=_concat_sets(train_parts, is_cls),
        seen_eval=_concat_sets(eval_parts, is_cls),
        adapt=adapt,
        test=test,
    )


def budget_subset(split: DataSplit, speaker: str, budget: AdaptBudget, fold: int) -> ClipSet:
    """The (budget, fold) slice of one held-out speaker's adaptation pool."""
    if speaker not in split.adapt:
        raise ContractError(f"no adaptation pool for speaker {speaker!r}")
    pool = split.adapt[speaker]
    idx = budget.subset_indices(len(pool), split.clip_seconds, fold)
    return pool.subset(idx)


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------

_SET_KEYS = ("train", "seen_eval", "adapt", "test")


def _config_record(cfg: DataConfig) -> dict:
    rec = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    rec["holdout"] = list(cfg.holdout)
    return rec


def _config_from_record(rec: dict) -> DataConfig:
    rec = dict(rec)
    rec["holdout"] = tuple(rec["holdout"])
    return DataConfig(**rec)


def export(split: DataSplit, directory) -> Path:
    """Write clips as tensor files plus a manifest.jsonl describing them."""
    directory = Path(directory)
    clips_dir = directory / "clips"
    clips_dir.mkdir(parents=True, exist_ok=True)
    is_cls = split.config.task == TASK_CLASSIFICATION
    records = [{"kind": "dataset_config", "config": _config_record(split.config)}]
    counter = 0

    def emit(set_name: str, speaker_key, cs: ClipSet) -> None:
        nonlocal counter
        for i in range(len(cs)):
            rel = f"clips/{counter:06d}.udtf"
            write_udtf(directory / rel, cs.clips[i])
            label = int(cs.labels[i]) if is_cls else list(cs.labels[i])
            records.append(
                {
                    "kind": "clip",
                    "path": rel,
                    "label": label,
                    "speaker": cs.speakers[i],
                    "split": set_name,
                    "pool": speaker_key,
                }
            )
            counter += 1

    emit("train", None, split.train)
    emit("seen_eval", None, split.seen_eval)
    for spk in split.config.holdout:
        emit("adapt", spk, split.adapt[spk])
        emit("test", spk, split.test[spk])
    manifest = directory / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return directory


def load(directory) -> DataSplit:
    """Rebuild a DataSplit from an exported directory."""
    directory = Path(directory)
    manifest = directory / "manifest.jsonl"
    if not manifest.exists():
        raise DataError(f"missing manifest {manifest}")
    records = [json.loads(line) for line in manifest.read_text().splitlines() if line.strip()]
    if not records or records[0].get("kind") != "dataset_config":
        raise DataError("manifest must start with a dataset_config record")
    cfg = _config_from_record(records[0]["config"])
    is_cls = cfg.task == TASK_CLASSIFICATION
    buckets: dict = {"train": [], "seen_eval": []}
    for spk in cfg.holdout:
        buckets[("adapt", spk)] = []
        buckets[("test", spk)] = []
    for rec in records[1:]:
        if rec.get("kind") != "clip":
            raise DataError(f"unknown manifest record kind {rec.get('kind')!r}")
        path = directory / rec["path"]
        if not path.exists():
            raise DataError(f"manifest references missing clip file {path}")
        clip = read_udtf(path)
        label = int(rec["label"]) if is_cls else tuple(int(t) for t in rec["label"])
        key = rec["split"] if rec["pool"] is None else (rec["split"], rec["pool"])
        if key not in buckets:
            raise DataError(f"manifest references unknown pool {key!r}")
        buckets[key].append((clip, label, rec["speaker"]))

    def build(entries) -> ClipSet:
        if not entries:
            raise DataError("manifest is missing clips for one of the declared pools")
        clips = np.stack([e[0] for e in entries])
        labels = [e[1] for e in entries]
        if is_cls:
            labels = np.asarray(labels, dtype=np.int64)
        return ClipSet(clips=clips, labels=labels, speakers=[e[2] for e in entries])

    return DataSplit(
        config=cfg,
        train=build(buckets["train"]),
        seen_eval=build(buckets["seen_eval"]),
        adapt={spk: build(buckets[("adapt", spk)]) for spk in cfg.holdout},
        test={spk: build(buckets[("test", spk)]) for spk in cfg.holdout},
    )
