"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"HAAN"  u32 version  u32 section_count
    per section: u16 name_len, name (UTF-8), u8 rank, rank x u32 dims,
                 row-major float32 payload
    u64 step

Optimizer moments are ordinary sections whose names end in ``.m`` / ``.v``.
"""

import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"HAAN"
VERSION = 1


class Checkpoint:
    """Ordered ``name -> float32 ndarray`` sections plus a step counter."""

    def __init__(self, sections=None, step=0):
        self.sections = OrderedDict()
        for name, arr in (sections or {}).items():
            self.sections[name] = np.ascontiguousarray(arr, dtype=np.float32)
        self.step = int(step)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint) or self.step != other.step:
            return False
        if list(self.sections) != list(other.sections):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.sections.values(), other.sections.values())
        )

    def subset(self, prefix):
        """Sections under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        return OrderedDict((k[cut:], v) for k, v in self.sections.items() if k.startswith(prefix + "."))

    def to_bytes(self):
        parts = [MAGIC, struct.pack("<II", VERSION, len(self.sections))]
        for name, arr in self.sections.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"section name too long: {name[:40]}...")
            if arr.ndim > 255:
                raise FormatError(f"section {name}: rank {arr.ndim} too large")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(arr.astype("<f4", copy=False).tobytes())
        parts.append(struct.pack("<Q", self.step))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf):
        view = memoryview(buf)
        pos = 0

        def take(n, what):
            nonlocal pos
            if pos + n > len(view):
                raise FormatError(f"truncated file while reading {what}")
            out = view[pos : pos + n]
            pos += n
            return out

        if bytes(take(4, "header")) != MAGIC:
            raise FormatError("header: bad magic, not a HAAN checkpoint")
        version, count = struct.unpack("<II", take(8, "header"))
        if version != VERSION:
            raise FormatError(f"header: unsupported version {version}")
        sections = OrderedDict()
        for i in range(count):
            (nlen,) = struct.unpack("<H", take(2, f"section {i} name length"))
            try:
                name = bytes(take(nlen, f"section {i} name")).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError(f"section {i}: name is not UTF-8") from exc
            if name in sections:
                raise FormatError(f"section {name}: duplicate name")
            (rank,) = struct.unpack("<B", take(1, f"section {name} rank"))
            dims = struct.unpack(f"<{rank}I", take(4 * rank, f"section {name} dims"))
            size = int(np.prod(dims, dtype=np.int64))
            payload = take(4 * size, f"section {name} payload")
            sections[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
        (step,) = struct.unpack("<Q", take(8, "step counter"))
        if pos != len(view):
            raise FormatError(f"trailing data: {len(view) - pos} bytes after step counter")
        return cls(sections, step)


def save_checkpoint(ckpt, path):
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    data = ckpt.to_bytes()
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return Checkpoint.from_bytes(data)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
