"""Per-speaker padding rings: the only thing that changes between users.

A UserPadding holds one flat ring per ring-enabled conv layer plus the
fingerprint of the model config it was trained against.  Rings persist as
.udpp files — a small header followed by one UDTF block per ring — and a
PaddingRegistry is a directory of those files with atomic writes and
fingerprint-checked lookups.
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .errors import CompatibilityError, ContractError, FormatError
from .model import RecognizerModel
from .udtf import read_udtf_stream, write_udtf_stream

PADDING_MAGIC = b"UDPP"
PADDING_VERSION = 1

_SPEAKER_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


def validate_speaker_id(speaker_id: str) -> None:
    if not isinstance(speaker_id, str) or not _SPEAKER_ID_RE.match(speaker_id):
        raise ContractError(
            f"speaker id {speaker_id!r} must be non-empty and filesystem-safe "
            "(letters, digits, '_', '.', '-')"
        )


@dataclass
class UserPadding:
    """speaker_id + {layer_index: flat ring} + owning-config fingerprint."""

    speaker_id: str
    config_fingerprint: int
    rings: dict[int, np.ndarray]

    def parameter_count(self) -> int:
        return sum(r.size for r in self.rings.values())

    def copy(self) -> "UserPadding":
        return UserPadding(
            speaker_id=self.speaker_id,
            config_fingerprint=self.config_fingerprint,
            rings={i: r.copy() for i, r in self.rings.items()},
        )

    def equals(self, other: "UserPadding") -> bool:
        return (
            self.speaker_id == other.speaker_id
            and self.config_fingerprint == other.config_fingerprint
            and set(self.rings) == set(other.rings)
            and all(self.rings[i].tobytes() == other.rings[i].tobytes() for i in self.rings)
        )


def init_user_padding(model: RecognizerModel, speaker_id: str) -> UserPadding:
    """Zero rings: behaves exactly like the speaker-independent baseline."""
    validate_speaker_id(speaker_id)
    dt = model.config.numpy_dtype()
    return UserPadding(
        speaker_id=speaker_id,
        config_fingerprint=model.fingerprint,
        rings={i: np.zeros(n, dtype=dt) for i, n in model.ring_sizes().items()},
    )


def save_padding_stream(f: BinaryIO, padding: UserPadding) -> None:
    sid = padding.speaker_id.encode("utf-8")
    f.write(PADDING_MAGIC)
    f.write(struct.pack("<B", PADDING_VERSION))
    f.write(struct.pack("<H", len(sid)))
    f.write(sid)
    f.write(struct.pack("<Q", padding.config_fingerprint))
    f.write(struct.pack("<H", len(padding.rings)))
    for i in sorted(padding.rings):
        f.write(struct.pack("<H", i))
        write_udtf_stream(f, padding.rings[i])


def load_padding_stream(f: BinaryIO) -> UserPadding:
    head = f.read(5)
    if len(head) != 5 or head[:4] != PADDING_MAGIC:
        raise FormatError("padding file: bad magic")
    if head[4] != PADDING_VERSION:
        raise FormatError(f"padding file: unsupported version {head[4]}")
    raw = f.read(2)
    if len(raw) != 2:
        raise FormatError("padding file: truncated speaker id length")
    (sid_len,) = struct.unpack("<H", raw)
    sid = f.read(sid_len)
    if len(sid) != sid_len:
        raise FormatError("padding file: truncated speaker id")
    raw = f.read(10)
    if len(raw) != 10:
        raise FormatError("padding file: truncated header")
    fp, count = struct.unpack("<QH", raw)
    rings: dict[int, np.ndarray] = {}
    for _ in range(count):
        raw = f.read(2)
        if len(raw) != 2:
            raise FormatError("padding file: truncated ring index")
        (idx,) = struct.unpack("<H", raw)
        if idx in rings:
            raise FormatError(f"padding file: duplicate ring for layer {idx}")
        arr = read_udtf_stream(f)
        if arr.ndim != 1:
            raise FormatError(f"padding file: ring for layer {idx} is not flat")
        rings[idx] = arr
    return UserPadding(speaker_id=sid.decode("utf-8"), config_fingerprint=fp, rings=rings)


def save_padding(path, padding: UserPadding) -> None:
    with open(path, "wb") as f:
        save_padding_stream(f, padding)


def load_padding(path) -> UserPadding:
    with open(path, "rb") as f:
        padding = load_padding_stream(f)
        if f.read(1):
            raise FormatError("padding file: trailing bytes")
    return padding


def check_padding_matches(padding: UserPadding, model: RecognizerModel) -> None:
    if padding.config_fingerprint != model.fingerprint:
        raise CompatibilityError(
            f"padding fingerprint {padding.config_fingerprint:#018x} does not match "
            f"model {model.fingerprint:#018x}"
        )
    want = model.ring_sizes()
    if set(padding.rings) != set(want):
        raise CompatibilityError(
            f"padding layers {sorted(padding.rings)} do not match model udp layers {sorted(want)}"
        )
    for i, n in want.items():
        if padding.rings[i].shape != (n,):
            raise CompatibilityError(f"layer {i} ring has {padding.rings[i].size} values, expected {n}")


class PaddingRegistry:
    """Directory of <speaker_id>.udpp files.

    Writes are atomic (temp file + rename) and loads verify the stored
    fingerprint against the model, so a lookup can never hand back rings that
    belong to a different architecture.
    """

    def __init__(self, root):
        self.root = os.fspath(root)
        os.makedirs(self.root, exist_ok=True)

    def _path(self, speaker_id: str) -> str:
        validate_speaker_id(speaker_id)
        return os.path.join(self.root, speaker_id + ".udpp")

    def has(self, speaker_id: str) -> bool:
        return os.path.exists(self._path(speaker_id))

    def speakers(self) -> list[str]:
        out = [f[: -len(".udpp")] for f in os.listdir(self.root) if f.endswith(".udpp")]
        return sorted(out)

    def save(self, padding: UserPadding) -> str:
        path = self._path(padding.speaker_id)
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            save_padding_stream(f, padding)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
        return path

    def load(self, speaker_id: str, model: RecognizerModel) -> UserPadding:
        path = self._path(speaker_id)
        if not os.path.exists(path):
            raise ContractError(f"no padding enrolled for speaker {speaker_id!r}")
        padding = load_padding(path)
        check_padding_matches(padding, model)
        return padding

    def delete(self, speaker_id: str) -> None:
        path = self._path(speaker_id)
        if os.path.exists(path):
            os.remove(path)
