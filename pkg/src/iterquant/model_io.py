"""Dense tensor bundle, IQWT model file I/O, and shared numeric helpers.

Tensors are 2-D float64 numpy arrays internally; the IQWT file stores
float32 payloads (little-endian, fixed field order) so serialization is
byte-exact deterministic for identical bundles.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FormatError, ValidationError

IQWT_MAGIC = b"IQWT"
IQWT_VERSION = 1


def as_matrix(data) -> np.ndarray:
    """Coerce input to a 2-D float64 matrix; 1-D input becomes 1 x n."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def check_finite(m: np.ndarray, what: str = "matrix") -> None:
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{what} contains non-finite entries")


@dataclass
class ModelBundle:
    """Ordered collection of named weight matrices plus string metadata."""

    tensors: list[tuple[str, np.ndarray]] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        seen = set()
        for name, m in self.tensors:
            if not name:
                raise ValidationError("tensor names must be non-empty")
            if name in seen:
                raise ValidationError(f"duplicate tensor name {name!r}")
            if len(name.encode("utf-8")) > 0xFFFF:
                raise ValidationError(f"tensor name too long: {name!r}")
            seen.add(name)
            m2 = as_matrix(m)
            check_finite(m2, f"tensor {name!r}")

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.tensors]

    def tensor(self, name: str) -> np.ndarray:
        for n, m in self.tensors:
            if n == name:
                return m
        raise KeyError(name)

    def replaced(self, updates: dict[str, np.ndarray]) -> "ModelBundle":
        """New bundle with some tensors substituted, order preserved."""
        out = [(n, updates.get(n, m)) for n, m in self.tensors]
        return ModelBundle(out, dict(self.metadata))


def sse(a, b) -> float:
    """Sum of squared differences between two equal-shape matrices.

    This is the squared Euclidean norm of (a - b), summed, not averaged.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.dot(d.ravel(), d.ravel()))


def save_model(bundle: ModelBundle, path) -> None:
    """Write an IQWT file. Output bytes are deterministic for equal input."""
    bundle.validate()
    parts = [IQWT_MAGIC, struct.pack("<I", IQWT_VERSION)]
    parts.append(struct.pack("<I", len(bundle.tensors)))
    for name, m in bundle.tensors:
        m = as_matrix(m)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", 2))
        parts.append(struct.pack("<II", m.shape[0], m.shape[1]))
        parts.append(struct.pack("<B", 0))
        parts.append(m.astype("<f4").tobytes(order="C"))
    meta_items = sorted(bundle.metadata.items())
    if len(meta_items) > 0xFFFF:
        raise ValidationError("too many metadata entries")
    parts.append(struct.pack("<H", len(meta_items)))
    for key, val in meta_items:
        kb = key.encode("utf-8")
        vb = str(val).encode("utf-8")
        if len(kb) > 0xFFFF or len(vb) > 0xFFFF:
            raise ValidationError(f"metadata entry too long: {key!r}")
        parts.append(struct.pack("<H", len(kb)))
        parts.append(kb)
        parts.append(struct.pack("<H", len(vb)))
        parts.append(vb)
    blob = b"".join(parts)
    with open(path, "wb") as f:
        f.write(blob)


class _Reader:
    """Cursor over a byte blob that raises FormatError on truncation."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("truncated file")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_model(path) -> ModelBundle:
    """Read an IQWT file back into a bundle of float64 matrices."""
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    if r.take(4) != IQWT_MAGIC:
        raise FormatError("bad magic, not an IQWT file")
    version = r.u32()
    if version != IQWT_VERSION:
        raise FormatError(f"unsupported IQWT version {version}")
    count = r.u32()
    tensors: list[tuple[str, np.ndarray]] = []
    for _ in range(count):
        name = r.take(r.u16()).decode("utf-8")
        ndim = r.u8()
        if ndim != 2:
            raise FormatError(f"unsupported tensor rank {ndim}")
        rows, cols = struct.unpack("<II", r.take(8))
        dtype = r.u8()
        if dtype != 0:
            raise FormatError(f"unsupported dtype byte {dtype}")
        payload = r.take(rows * cols * 4)
        m = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
        tensors.append((name, m.astype(np.float64)))
    meta_count = r.u16()
    metadata = {}
    for _ in range(meta_count):
        key = r.take(r.u16()).decode("utf-8")
        val = r.take(r.u16()).decode("utf-8")
        metadata[key] = val
    if r.pos != len(blob):
        raise FormatError("trailing bytes after footer")
    bundle = ModelBundle(tensors, metadata)
    bundle.validate()
    return bundle
