"""Video tensors, seeded random streams and the ``.vten`` binary format."""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np


class DimensionError(ValueError):
    pass


class FormatError(ValueError):
    pass


class Domain(enum.IntEnum):
    UNCONSTRAINED = 0
    PIXEL = 1  # [0, 255]
    MODEL = 2  # [-1, 1]


_MAX_ELEMENTS = 2**40


def check_shape(shape) -> tuple[int, int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise DimensionError(f"expected a 4-tuple (f, c, h, w), got {shape}")
    if any(s < 1 for s in shape):
        raise DimensionError(f"all dimensions must be >= 1, got {shape}")
    if int(np.prod(shape, dtype=object)) > _MAX_ELEMENTS:
        raise DimensionError(f"shape {shape} overflows the element limit")
    return shape


@dataclass(frozen=True, eq=False)
class VideoTensor:
    """Frame-major ``(f, c, h, w)`` float32 array tagged with its value domain.

    The wrapped array is made read-only so instances can be shared freely.
    """

    data: np.ndarray
    domain: Domain = Domain.UNCONSTRAINED

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        check_shape(arr.shape)
        domain = Domain(self.domain)
        if domain is Domain.PIXEL and arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("pixel tensors must lie in [0, 255]")
        if arr is self.data:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "domain", domain)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    def frame(self, i: int) -> np.ndarray:
        return self.data[i]

    def numpy(self) -> np.ndarray:
        """Writable copy of the payload."""
        return self.data.copy()

    def with_data(self, data, domain: Domain | None = None) -> VideoTensor:
        return VideoTensor(data, self.domain if domain is None else domain)

    def bit_equal(self, other: VideoTensor) -> bool:
        return (
            self.shape == other.shape
            and self.domain == other.domain
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self):
        return f"VideoTensor(shape={self.shape}, domain={self.domain.name})"


def tensor_new(shape, fill: float = 0.0) -> VideoTensor:
    shape = check_shape(shape)
    return VideoTensor(np.full(shape, fill, dtype=np.float32))


class Rng:
    """Seeded random stream backed by Philox (counter-based).

    Philox output depends only on (key, counter), so streams are identical
    across hosts. ``spawn`` derives independent child streams from the seed
    tree, which is how per-sample seeds are produced.
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            if seed < 0 or seed >= 2**64:
                raise ValueError("seed must be a 64-bit unsigned integer")
            self._seq = np.random.SeedSequence(int(seed))
        self.generator = np.random.Generator(np.random.Philox(self._seq))

    def spawn(self, n: int) -> list[Rng]:
        return [Rng(s) for s in self._seq.spawn(n)]

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self.generator.standard_normal(shape, dtype=np.float64).astype(dtype)

    def uniform(self, size=None) -> np.ndarray | float:
        return self.generator.random(size)

    def integers(self, low: int, high: int, size=None):
        """Integers in the closed range [low, high]."""
        return self.generator.integers(low, high, size=size, endpoint=True)

    def choice(self, seq):
        return seq[int(self.generator.integers(0, len(seq)))]

    def derive_seed(self) -> int:
        return int(self.generator.integers(0, 2**63))


def rng_gaussian(rng: Rng, shape) -> VideoTensor:
    shape = check_shape(shape)
    return VideoTensor(rng.normal(shape))


# .vten layout: magic, version, dtype code, 4 x u64 dims, domain tag, payload (LE float32)
VTEN_MAGIC = b"VTEN\x89\r\n\x1a"
VTEN_VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<8sIB4QB")


def write_tensor(fh: BinaryIO, t: VideoTensor) -> None:
    fh.write(_HEADER.pack(VTEN_MAGIC, VTEN_VERSION, DTYPE_F32, *t.shape, int(t.domain)))
    fh.write(t.data.astype("<f4", copy=False).tobytes())


def read_tensor(fh: BinaryIO) -> VideoTensor:
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise FormatError("truncated .vten header")
    magic, version, dtype, f, c, h, w, domain = _HEADER.unpack(head)
    if magic != VTEN_MAGIC:
        raise FormatError("bad .vten magic")
    if version != VTEN_VERSION:
        raise FormatError(f"unsupported .vten version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    try:
        shape = check_shape((f, c, h, w))
        domain = Domain(domain)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    nbytes = 4 * f * c * h * w
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError(f"payload has {len(payload)} bytes, header declares {nbytes}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    try:
        return VideoTensor(data, domain)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_tensor(t: VideoTensor, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path: str | os.PathLike) -> VideoTensor:
    with open(path, "rb") as fh:
        t = read_tensor(fh)
        if fh.read(1):
            raise FormatError("trailing bytes after .vten payload")
    return t


def to_u8_frames(video: VideoTensor) -> np.ndarray:
    """(f, h, w, c) uint8 view of a pixel-range video with 1 or 3 channels."""
    if video.domain is not Domain.PIXEL:
        raise ValueError("PPM export needs a pixel-range tensor")
    arr = np.clip(np.rint(video.data), 0, 255).astype(np.uint8).transpose(0, 2, 3, 1)
    if arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    elif arr.shape[-1] != 3:
        raise DimensionError("PPM export needs 1 or 3 channels")
    return arr


def write_ppm(path: str | os.PathLike, frame: np.ndarray) -> None:
    h, w, _ = frame.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(frame, dtype=np.uint8).tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(x) for x in fields[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    body = raw[pos + 1:pos + 1 + w * h * 3]
    if len(body) != w * h * 3:
        raise FormatError(f"{path}: truncated PPM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def export_ppm_frames(video: VideoTensor, directory: str | os.PathLike, prefix: str = "frame") -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, frame in enumerate(to_u8_frames(video)):
        p = os.path.join(directory, f"{prefix}_{i:04d}.ppm")
        write_ppm(p, frame)
        paths.append(p)
    return paths


def load_ppm_dir(directory: str | os.PathLike) -> VideoTensor:
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".ppm"))
    if not names:
        raise FormatError(f"no .ppm files in {directory}")
    frames = [read_ppm(os.path.join(directory, n)) for n in names]
    if len({f.shape for f in frames}) != 1:
        raise FormatError("PPM frames differ in size")
    arr = np.stack(frames).transpose(0, 3, 1, 2).astype(np.float32)
    return VideoTensor(arr, Domain.PIXEL)


def load_video(path: str | os.PathLike) -> VideoTensor:
    """Load a ``.vten`` file or a directory of PPM frames."""
    if os.path.isdir(path):
        return load_ppm_dir(path)
    return load_tensor(path)
