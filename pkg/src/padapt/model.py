"""Recognizer models whose spatial convolutions read learnable border rings.

A model is a per-frame 2-D conv front-end (each conv preceded by ring
assembly), global average pooling to one feature vector per frame, a temporal
1-D conv back-end, and a task head (classification logits or per-frame CTC
logits).  All weights are ordinary tensors; the rings are *not* stored here —
they are supplied per call, so one frozen model serves every speaker.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ring_cells
from .errors import CompatibilityError, ConfigError, ContractError, FormatError, ShapeError
from .udtf import read_udtf_stream, write_udtf_stream

TASK_CLASSIFICATION = "classification"
TASK_CTC = "ctc_sequence"

_DTYPES = {"f64": np.float64, "f32": np.float32}

CHECKPOINT_MAGIC = b"UDCP"
CHECKPOINT_VERSION = 1


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash (stable across platforms)."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class ConvStage:
    """One front-end conv: ``pad``-wide ring assembly then a valid k x k
    cross-correlation with the given stride."""

    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1


@dataclass(frozen=True)
class ModelConfig:
    task: str
    vocab_size: int
    frontend: tuple[ConvStage, ...]
    udp_layer_indices: tuple[int, ...]
    backend_width: int = 160
    backend_kernel: int = 3
    input_hw: tuple[int, int] = (32, 32)
    in_channels: int = 1
    max_frames: int = 64
    dtype: str = "f64"
    seed: int = 0
    norm_momentum: float = 0.1
    norm_eps: float = 1e-5

    def numpy_dtype(self):
        return _DTYPES[self.dtype]


def validate_config(cfg: ModelConfig) -> None:
    if cfg.task not in (TASK_CLASSIFICATION, TASK_CTC):
        raise ConfigError(f"unknown task {cfg.task!r}")
    if cfg.vocab_size < 2:
        raise ConfigError("vocab_size must be at least 2")
    if cfg.dtype not in _DTYPES:
        raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}, got {cfg.dtype!r}")
    if not cfg.frontend:
        raise ConfigError("frontend must have at least one conv stage")
    if cfg.in_channels < 1 or cfg.max_frames < 1 or cfg.backend_width < 1:
        raise ConfigError("channel/frame/width counts must be positive")
    idxs = tuple(cfg.udp_layer_indices)
    if len(set(idxs)) != len(idxs):
        raise ConfigError("udp_layer_indices contains duplicates")
    for i in idxs:
        if not (0 <= i < len(cfg.frontend)):
            raise ConfigError(f"udp layer index {i} out of range for {len(cfg.frontend)} stages")
        if cfg.frontend[i].pad < 1:
            raise ConfigError(f"udp layer {i} has no padding to learn (pad=0)")
    h, w = cfg.input_hw
    for li, st in enumerate(cfg.frontend):
        if st.out_channels < 1 or st.kernel < 1 or st.stride < 1 or st.pad < 0:
            raise ConfigError(f"stage {li}: non-positive geometry")
        hp, wp = h + 2 * st.pad, w + 2 * st.pad
        if st.kernel > hp or st.kernel > wp:
            raise ConfigError(f"stage {li}: kernel {st.kernel} exceeds padded input {hp}x{wp}")
        h = (hp - st.kernel) // st.stride + 1
        w = (wp - st.kernel) // st.stride + 1
    if h < 1 or w < 1:
        raise ConfigError("frontend collapses the spatial map to nothing")


def frontend_shapes(cfg: ModelConfig) -> list[tuple[int, int, int]]:
    """(C_in, H, W) seen by each conv stage, before its ring assembly."""
    shapes = []
    c, (h, w) = cfg.in_channels, cfg.input_hw
    for st in cfg.frontend:
        shapes.append((c, h, w))
        h = (h + 2 * st.pad - st.kernel) // st.stride + 1
        w = (w + 2 * st.pad - st.kernel) // st.stride + 1
        c = st.out_channels
    return shapes


def ring_sizes(cfg: ModelConfig) -> dict[int, int]:
    """Flat ring length per udp layer: C * ((H+2p)(W+2p) - H*W)."""
    shapes = frontend_shapes(cfg)
    out = {}
    for i in sorted(cfg.udp_layer_indices):
        c, h, w = shapes[i]
        out[i] = c * ring_cells(h, w, cfg.frontend[i].pad)
    return out


def ring_parameter_count(cfg: ModelConfig) -> int:
    return sum(ring_sizes(cfg).values())


def config_json(cfg: ModelConfig) -> str:
    """Canonical JSON: sorted keys, no whitespace, tuples as lists."""
    d = {
        "task": cfg.task,
        "vocab_size": cfg.vocab_size,
        "frontend": [[s.out_channels, s.kernel, s.stride, s.pad] for s in cfg.frontend],
        "udp_layer_indices": list(cfg.udp_layer_indices),
        "backend_width": cfg.backend_width,
        "backend_kernel": cfg.backend_kernel,
        "input_hw": list(cfg.input_hw),
        "in_channels": cfg.in_channels,
        "max_frames": cfg.max_frames,
        "dtype": cfg.dtype,
        "seed": cfg.seed,
        "norm_momentum": cfg.norm_momentum,
        "norm_eps": cfg.norm_eps,
    }
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def config_from_json(text: str) -> ModelConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"config JSON does not parse: {e}") from e
    try:
        return ModelConfig(
            task=d["task"],
            vocab_size=int(d["vocab_size"]),
            frontend=tuple(ConvStage(*[int(v) for v in s]) for s in d["frontend"]),
            udp_layer_indices=tuple(int(i) for i in d["udp_layer_indices"]),
            backend_width=int(d["backend_width"]),
            backend_kernel=int(d["backend_kernel"]),
            input_hw=(int(d["input_hw"][0]), int(d["input_hw"][1])),
            in_channels=int(d["in_channels"]),
            max_frames=int(d["max_frames"]),
            dtype=d["dtype"],
            seed=int(d["seed"]),
            norm_momentum=float(d["norm_momentum"]),
            norm_eps=float(d["norm_eps"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"config JSON missing or malformed field: {e}") from e


def config_fingerprint(cfg: ModelConfig) -> int:
    return fnv1a64(config_json(cfg).encode("utf-8"))


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

# One canonical 17-conv architecture; presets differ only in how many of its
# convs expose learnable rings (earliest-N).  Channel growth is front-loaded so
# that deep rings stay small next to the wide temporal back-end, keeping the
# per-speaker artifact a fraction of a percent of the model.
_STANDARD_FRONTEND = (
    (ConvStage(16, 3, 2, 1),)
    + (ConvStage(24, 3, 2, 1),)
    + (ConvStage(24, 3, 2, 1),)
    + tuple(ConvStage(24, 3, 1, 1) for _ in range(14))
)

PRESET_UDP_COUNTS = {"small": 5, "medium": 11, "full": 17}


def preset_udp_indices(preset: str | int) -> tuple[int, ...]:
    if isinstance(preset, str):
        if preset not in PRESET_UDP_COUNTS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESET_UDP_COUNTS)}")
        n = PRESET_UDP_COUNTS[preset]
    else:
        n = int(preset)
        if n not in PRESET_UDP_COUNTS.values():
            raise ConfigError(f"preset layer count must be one of {sorted(PRESET_UDP_COUNTS.values())}")
    return tuple(range(n))


def standard_config(
    task: str = TASK_CLASSIFICATION,
    vocab_size: int = 12,
    preset: str | int = "full",
    dtype: str = "f64",
    seed: int = 0,
    backend_width: int | None = None,
) -> ModelConfig:
    """The stock 17-conv recognizer with rings on the earliest 5/11/17 convs."""
    if backend_width is None:
        backend_width = 1120 if task == TASK_CLASSIFICATION else 160
    cfg = ModelConfig(
        task=task,
        vocab_size=vocab_size,
        frontend=_STANDARD_FRONTEND,
        udp_layer_indices=preset_udp_indices(preset),
        backend_width=backend_width,
        input_hw=(32, 32),
        in_channels=1,
        max_frames=64,
        dtype=dtype,
        seed=seed,
    )
    validate_config(cfg)
    return cfg


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class _ConvBlock:
    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    stage: ConvStage


@dataclass
class _Conv1dBlock:
    weight: Tensor
    bias: Tensor
    kernel: int
    pad: int


class RecognizerModel:
    """Frozen-weight recognizer parameterized per speaker by padding rings.

    forward(clip, padding) runs one [T, C, H, W] clip; forward_batch runs
    [B, T, C, H, W] with one shared ring set (a per-speaker batch).  padding
    may be None (zero rings: the speaker-independent baseline), a UserPadding,
    or a plain {layer_index: ring} mapping whose values may be graph tensors
    (the adaptation path).
    """

    def __init__(self, config: ModelConfig):
        validate_config(config)
        self.config = config
        self.fingerprint = config_fingerprint(config)
        self.training = False
        dt = config.numpy_dtype()
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xD1)))
        shapes = frontend_shapes(config)

        self.frontend: list[_ConvBlock] = []
        for (c, _, _), st in zip(shapes, config.frontend):
            fan_in = c * st.kernel * st.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(st.out_channels, c, st.kernel, st.kernel))
            self.frontend.append(
                _ConvBlock(
                    weight=Tensor(w.astype(dt)),
                    bias=Tensor(np.zeros(st.out_channels, dtype=dt)),
                    gamma=Tensor(np.ones(st.out_channels, dtype=dt)),
                    beta=Tensor(np.zeros(st.out_channels, dtype=dt)),
                    running_mean=np.zeros(st.out_channels, dtype=dt),
                    running_var=np.ones(st.out_channels, dtype=dt),
                    stage=st,
                )
            )

        c_last, h_last, w_last = shapes[-1]
        st = config.frontend[-1]
        h_out = (h_last + 2 * st.pad - st.kernel) // st.stride + 1
        w_out = (w_last + 2 * st.pad - st.kernel) // st.stride + 1
        del h_out, w_out  # GAP removes spatial dims; kept for clarity
        self.feature_dim = config.frontend[-1].out_channels

        wdt, k = config.backend_width, config.backend_kernel
        self.backend: list[_Conv1dBlock] = []
        for f_in in (self.feature_dim, wdt):
            w = rng.normal(0.0, np.sqrt(2.0 / (f_in * k)), size=(wdt, f_in, k))
            self.backend.append(
                _Conv1dBlock(
                    weight=Tensor(w.astype(dt)),
                    bias=Tensor(np.zeros(wdt, dtype=dt)),
                    kernel=k,
                    pad=(k - 1) // 2,
                )
            )

        head_out = config.vocab_size if config.task == TASK_CLASSIFICATION else config.vocab_size + 1
        hw = rng.normal(0.0, np.sqrt(1.0 / wdt), size=(wdt, head_out))
        self.head_weight = Tensor(hw.astype(dt))
        self.head_bias = Tensor(np.zeros(head_out, dtype=dt))
        self._ring_sizes = ring_sizes(config)

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, blk in enumerate(self.frontend):
            out += [
                (f"frontend.{i}.weight", blk.weight),
                (f"frontend.{i}.bias", blk.bias),
                (f"frontend.{i}.gamma", blk.gamma),
                (f"frontend.{i}.beta", blk.beta),
            ]
        for i, blk in enumerate(self.backend):
            out += [(f"backend.{i}.weight", blk.weight), (f"backend.{i}.bias", blk.bias)]
        out += [("head.weight", self.head_weight), ("head.bias", self.head_bias)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, blk in enumerate(self.frontend):
            out += [
                (f"frontend.{i}.running_mean", blk.running_mean),
                (f"frontend.{i}.running_var", blk.running_var),
            ]
        return out

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag
            if not flag:
                t.grad = None

    def set_training(self, flag: bool) -> None:
        self.training = flag

    def ring_sizes(self) -> dict[int, int]:
        return dict(self._ring_sizes)

    # -- forward ------------------------------------------------------------

    def _resolve_rings(self, padding) -> dict[int, Tensor | None]:
        rings: dict[int, Tensor | None] = {i: None for i in range(len(self.frontend))}
        if padding is None:
            return rings
        fp = getattr(padding, "config_fingerprint", None)
        if fp is not None and fp != self.fingerprint:
            raise CompatibilityError(
                f"padding fingerprint {fp:#018x} does not match model {self.fingerprint:#018x}"
            )
        mapping = getattr(padding, "rings", padding)
        if not isinstance(mapping, Mapping):
            raise ContractError("padding must be None, a UserPadding, or a {layer: ring} mapping")
        expected = set(self._ring_sizes)
        got = set(int(k) for k in mapping.keys())
        if got != expected:
            raise ContractError(
                f"padding layers {sorted(got)} do not match udp layers {sorted(expected)}"
            )
        dt = self.config.numpy_dtype()
        for i, ring in mapping.items():
            i = int(i)
            t = ring if isinstance(ring, Tensor) else Tensor(np.asarray(ring, dtype=dt))
            if t.data.shape != (self._ring_sizes[i],):
                raise ShapeError(
                    f"layer {i} ring has shape {t.data.shape}, expected ({self._ring_sizes[i]},)"
                )
            rings[i] = t
        return rings

    def frontend_features(self, frames: Tensor, padding=None) -> Tensor:
        """[N, C, H, W] frames -> [N, F] pooled features."""
        x = frames
        for x in self._frontend_pass(frames, padding):
            pass  # consume the stage generator; x ends as the last activation
        return ad.global_avgpool2d(x)

    def _frontend_pass(self, frames: Tensor, padding=None):
        rings = self._resolve_rings(padding)
        x = frames
        for i, blk in enumerate(self.frontend):
            st = blk.stage
            x = ad.pad_assemble(x, rings[i], st.pad)
            x = ad.conv2d(x, blk.weight, blk.bias, stride=st.stride)
            x = ad.batchnorm2d(
                x,
                blk.gamma,
                blk.beta,
                blk.running_mean,
                blk.running_var,
                training=self.training,
                momentum=self.config.norm_momentum,
                eps=self.config.norm_eps,
            )
            x = ad.relu(x)
            yield x

    def frontend_activations(self, frames, padding=None) -> list[np.ndarray]:
        """Post-stage activations per conv stage (inference only; used to
        study how far ring perturbations reach)."""
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=self.config.numpy_dtype()))
        with ad.no_grad():
            return [t.data for t in self._frontend_pass(x, padding)]

    def backend_head(self, feats: Tensor) -> Tensor:
        """[B, T, F] per-frame features -> task logits.

        classification: [B, vocab]; ctc_sequence: [B, T, vocab+1].
        """
        x = ad.swap_last2(feats)  # [B, F, T]
        for blk in self.backend:
            x = ad.conv1d(x, blk.weight, blk.bias, pad=blk.pad)
            x = ad.relu(x)
        if self.config.task == TASK_CLASSIFICATION:
            pooled = ad.mean_axis(x, 2)  # [B, W]
            return ad.add_rowvec(ad.matmul(pooled, self.head_weight), self.head_bias)
        frames = ad.swap_last2(x)  # [B, T, W]
        b, t, wdt = frames.data.shape
        flat = ad.reshape(frames, (b * t, wdt))
        logits = ad.add_rowvec(ad.matmul(flat, self.head_weight), self.head_bias)
        return ad.reshape(logits, (b, t, logits.data.shape[-1]))

    def _check_clip_shape(self, arr: np.ndarray, batched: bool) -> None:
        want_rank = 5 if batched else 4
        if arr.ndim != want_rank:
            raise ShapeError(f"clip must be rank {want_rank}, got shape {arr.shape}")
        t_axis = 1 if batched else 0
        h, w = self.config.input_hw
        if arr.shape[t_axis] > self.config.max_frames:
            raise ContractError(
                f"clip has {arr.shape[t_axis]} frames, model max_frames is {self.config.max_frames}"
            )
        if arr.shape[-3:] != (self.config.in_channels, h, w):
            raise ShapeError(
                f"frames must be ({self.config.in_channels}, {h}, {w}), got {arr.shape[-3:]}"
            )

    def forward_batch(self, clips, padding=None) -> Tensor:
        """[B, T, C, H, W] -> logits; one shared ring set for the whole batch."""
        x = clips if isinstance(clips, Tensor) else Tensor(np.asarray(clips, dtype=self.config.numpy_dtype()))
        self._check_clip_shape(x.data, batched=True)
        b, t = x.data.shape[0], x.data.shape[1]
        flat = ad.reshape(x, (b * t,) + x.data.shape[2:])
        feats = self.frontend_features(flat, padding)
        feats = ad.reshape(feats, (b, t, self.feature_dim))
        return self.backend_head(feats)

    def forward(self, clip, padding=None) -> Tensor:
        """[T, C, H, W] -> logits for one clip ([vocab] or [T, vocab+1])."""
        x = clip if isinstance(clip, Tensor) else Tensor(np.asarray(clip, dtype=self.config.numpy_dtype()))
        self._check_clip_shape(x.data, batched=False)
        batched = ad.reshape(x, (1,) + x.data.shape)
        out = self.forward_batch(batched, padding)
        return ad.reshape(out, out.data.shape[1:])


def build_model(config: ModelConfig) -> RecognizerModel:
    return RecognizerModel(config)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _state_arrays(model: RecognizerModel) -> list[tuple[str, np.ndarray]]:
    return [(n, t.data) for n, t in model.named_parameters()] + list(model.named_buffers())


def save_checkpoint_stream(f: BinaryIO, model: RecognizerModel) -> None:
    blob = config_json(model.config).encode("utf-8")
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<B", CHECKPOINT_VERSION))
    f.write(struct.pack("<I", len(blob)))
    f.write(blob)
    f.write(struct.pack("<Q", fnv1a64(blob)))
    arrays = _state_arrays(model)
    f.write(struct.pack("<I", len(arrays)))
    for _, arr in arrays:
        write_udtf_stream(f, arr)


def save_checkpoint(path, model: RecognizerModel) -> None:
    with open(path, "wb") as f:
        save_checkpoint_stream(f, model)


def load_checkpoint_stream(f: BinaryIO) -> RecognizerModel:
    head = f.read(5)
    if len(head) != 5 or head[:4] != CHECKPOINT_MAGIC:
        raise FormatError("checkpoint: bad magic")
    if head[4] != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint: unsupported version {head[4]}")
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError("checkpoint: truncated header")
    (json_len,) = struct.unpack("<I", raw)
    blob = f.read(json_len)
    if len(blob) != json_len:
        raise FormatError("checkpoint: truncated config JSON")
    raw = f.read(8)
    if len(raw) != 8:
        raise FormatError("checkpoint: truncated fingerprint")
    (fp,) = struct.unpack("<Q", raw)
    if fp != fnv1a64(blob):
        raise CompatibilityError("checkpoint: config fingerprint does not match config JSON")
    cfg = config_from_json(blob.decode("utf-8"))
    validate_config(cfg)
    model = RecognizerModel(cfg)
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError("checkpoint: truncated tensor count")
    (count,) = struct.unpack("<I", raw)
    arrays = _state_arrays(model)
    if count != len(arrays):
        raise FormatError(f"checkpoint: has {count} tensors, model needs {len(arrays)}")
    for name, arr in arrays:
        block = read_udtf_stream(f)
        if block.shape != arr.shape:
            raise FormatError(f"checkpoint: {name} has shape {block.shape}, expected {arr.shape}")
        arr[...] = block.astype(arr.dtype, copy=False)
    return model


def load_checkpoint(path) -> RecognizerModel:
    with open(path, "rb") as f:
        model = load_checkpoint_stream(f)
        if f.read(1):
            raise FormatError("checkpoint: trailing bytes")
    return model


def checkpoint_bytes(model: RecognizerModel) -> bytes:
    import io

    buf = io.BytesIO()
    save_checkpoint_stream(buf, model)
    return buf.getvalue()


def clone_model(model: RecognizerModel) -> RecognizerModel:
    """Deep copy sharing nothing (used by full-finetune baselines)."""
    out = RecognizerModel(model.config)
    for (_, src), (_, dst) in zip(model.named_parameters(), out.named_parameters()):
        dst.data[...] = src.data
    for (_, src), (_, dst) in zip(model.named_buffers(), out.named_buffers()):
        dst[...] = src
    return out


def models_state_equal(a: RecognizerModel, b: RecognizerModel) -> bool:
    if config_json(a.config) != config_json(b.config):
        return False
    for (_, ta), (_, tb) in zip(a.named_parameters(), b.named_parameters()):
        if ta.data.tobytes() != tb.data.tobytes():
            return False
    for (_, ba), (_, bb) in zip(a.named_buffers(), b.named_buffers()):
        if ba.tobytes() != bb.tobytes():
            return False
    return True


def replace_preset(cfg: ModelConfig, preset: str | int) -> ModelConfig:
    """Same architecture, different set of ring-enabled convs."""
    new = replace(cfg, udp_layer_indices=preset_udp_indices(preset))
    validate_config(new)
    return new


def model_with_preset(model: RecognizerModel, preset: str | int) -> RecognizerModel:
    """Copy of ``model`` exposing a different ring preset.

    Weights and norm statistics are shared byte-for-byte (rings are not model
    state, so nothing else changes); only which conv stages accept rings —
    and therefore the padding fingerprint — differs.
    """
    out = build_model(replace_preset(model.config, preset))
    for (_, dst), (_, src) in zip(out.named_parameters(), model.named_parameters()):
        dst.data[...] = src.data
    for (_, dst), (_, src) in zip(out.named_buffers(), model.named_buffers()):
        dst[...] = src
    out.training = model.training
    return out
