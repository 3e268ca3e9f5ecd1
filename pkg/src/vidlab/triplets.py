"""Procedural (input video, instruction, edited video) triplets.

Scenes are a single square or circle bouncing over a flat background. Edits
come in three kinds: recolouring the shape, recolouring the background, or a
global colour style. Because the shape mask is known from rendering, the
edited video is exact ground truth.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .codec import load_vocab, tokenize
from .core import Domain, FormatError, Rng, VideoTensor, read_tensor, write_tensor

PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "cyan": (0, 255, 255),
    "magenta": (255, 0, 255),
    "orange": (255, 128, 0),
    "purple": (128, 0, 128),
    "white": (255, 255, 255),
    "black": (0, 0, 0),
}
COLORS = tuple(PALETTE)
SHAPES = ("square", "circle")
STYLES = ("grayscale", "invert", "sepia")
EDIT_TYPES = ("attribute_modification", "background_change", "style_transfer")

_SEPIA = np.array([[0.393, 0.769, 0.189],
                   [0.349, 0.686, 0.168],
                   [0.272, 0.534, 0.131]])


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    shape: str = "square"
    size: int = 8
    color: tuple[int, int, int] = (255, 0, 0)
    background: tuple[int, int, int] = (0, 0, 255)
    position: tuple[int, int] = (0, 0)  # (x, y) of the top-left corner at frame 0
    velocity: tuple[int, int] = (1, 0)  # (vx, vy) px/frame
    frames: int = 8
    height: int = 32
    width: int = 32

    def validate(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}")
        if self.size < 1 or self.size > min(self.height, self.width):
            raise ConfigError(f"shape of size {self.size} does not fit a {self.height}x{self.width} frame")
        if self.frames < 1:
            raise ConfigError("need at least one frame")
        for rgb in (self.color, self.background):
            if len(rgb) != 3 or any(not 0 <= v <= 255 for v in rgb):
                raise ConfigError(f"invalid colour {rgb}")
        x, y = self.position
        if not (0 <= x <= self.width - self.size and 0 <= y <= self.height - self.size):
            raise ConfigError(f"initial position {self.position} puts the shape outside the frame")


@dataclass(frozen=True)
class SceneRanges:
    frames: int = 8
    height: int = 32
    width: int = 32
    size: tuple[int, int] = (6, 12)
    max_speed: int = 2


def _bounce(p: int, v: int, hi: int, steps: int) -> list[int]:
    out = [p]
    if hi == 0:
        return out * steps
    for _ in range(steps - 1):
        p += v
        while p < 0 or p > hi:
            if p > hi:
                p = 2 * hi - p
            else:
                p = -p
            v = -v
        out.append(p)
    return out


def render_mask(spec: SceneSpec) -> np.ndarray:
    """Boolean ``(f, h, w)`` occupancy of the moving shape."""
    spec.validate()
    xs = _bounce(spec.position[0], spec.velocity[0], spec.width - spec.size, spec.frames)
    ys = _bounce(spec.position[1], spec.velocity[1], spec.height - spec.size, spec.frames)
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    mask = np.zeros((spec.frames, spec.height, spec.width), dtype=bool)
    r = spec.size / 2
    for i, (x, y) in enumerate(zip(xs, ys)):
        if spec.shape == "square":
            mask[i, y:y + spec.size, x:x + spec.size] = True
        else:
            mask[i] = (yy + 0.5 - (y + r)) ** 2 + (xx + 0.5 - (x + r)) ** 2 <= r * r
    return mask


def _paint(mask: np.ndarray, color, background) -> np.ndarray:
    f, h, w = mask.shape
    out = np.empty((f, 3, h, w), dtype=np.float32)
    for ch in range(3):
        out[:, ch] = np.where(mask, color[ch], background[ch])
    return out


def gen_video(spec: SceneSpec) -> VideoTensor:
    return VideoTensor(_paint(render_mask(spec), spec.color, spec.background), Domain.PIXEL)


def sample_scene(rng: Rng, ranges: SceneRanges = SceneRanges()) -> SceneSpec:
    size = int(rng.integers(*ranges.size))
    size = max(1, min(size, ranges.height // 2, ranges.width // 2))  # leave room to move
    colors = rng.generator.permutation(len(COLORS))[:2]
    vx = vy = 0
    while vx == 0 and vy == 0:
        vx, vy = (int(v) for v in rng.integers(-ranges.max_speed, ranges.max_speed, size=2))
    return SceneSpec(
        shape=rng.choice(SHAPES),
        size=size,
        color=PALETTE[COLORS[colors[0]]],
        background=PALETTE[COLORS[colors[1]]],
        position=(int(rng.integers(0, ranges.width - size)), int(rng.integers(0, ranges.height - size))),
        velocity=(vx, vy),
        frames=ranges.frames,
        height=ranges.height,
        width=ranges.width,
    )


@dataclass(frozen=True)
class EditSpec:
    edit_type: str
    payload: str  # colour name for recolour edits, style name for style_transfer

    def __post_init__(self):
        if self.edit_type not in EDIT_TYPES:
            raise ConfigError(f"unknown edit type {self.edit_type!r}")
        allowed = STYLES if self.edit_type == "style_transfer" else COLORS
        if self.payload not in allowed:
            raise ConfigError(f"payload {self.payload!r} does not fit {self.edit_type}")

    def code(self) -> tuple[int, int]:
        allowed = STYLES if self.edit_type == "style_transfer" else COLORS
        return EDIT_TYPES.index(self.edit_type), allowed.index(self.payload)

    @classmethod
    def from_code(cls, type_code: int, payload_code: int) -> EditSpec:
        try:
            edit_type = EDIT_TYPES[type_code]
            allowed = STYLES if edit_type == "style_transfer" else COLORS
            return cls(edit_type, allowed[payload_code])
        except IndexError as exc:
            raise FormatError(f"bad edit code ({type_code}, {payload_code})") from exc


class Grammar:
    """Closed instruction grammar over a fixed vocabulary."""

    def __init__(self, vocab: list[str] | None = None):
        self.vocab = load_vocab() if vocab is None else list(vocab)
        missing = {*COLORS, *STYLES, *SHAPES} - set(self.vocab)
        if missing:
            raise ConfigError(f"vocabulary lacks {sorted(missing)}")

    def text(self, edit: EditSpec, shape: str = "square") -> str:
        if edit.edit_type == "attribute_modification":
            return f"turn the {shape} into {edit.payload}"
        if edit.edit_type == "background_change":
            return f"change background to {edit.payload}"
        return f"turn to {edit.payload} style"

    def encode(self, edit: EditSpec, shape: str = "square") -> list[int]:
        return tokenize(self.text(edit, shape), self.vocab)

    def parse(self, token_ids) -> EditSpec:
        words = [self.vocab[i] for i in token_ids]
        match words:
            case ["turn", "the", shape, "into", color] if shape in SHAPES and color in COLORS:
                return EditSpec("attribute_modification", color)
            case ["change", "background", "to", color] if color in COLORS:
                return EditSpec("background_change", color)
            case ["turn", "to", style, "style"] if style in STYLES:
                return EditSpec("style_transfer", style)
        raise ConfigError(f"instruction {' '.join(words)!r} is not in the grammar")


def gen_instruction(rng: Rng, grammar: Grammar, scene: SceneSpec | None = None) -> tuple[list[int], EditSpec]:
    """Draw an edit type uniformly, then a payload that actually changes the scene."""
    edit_type = EDIT_TYPES[int(rng.integers(0, 2))]
    if edit_type == "style_transfer":
        edit = EditSpec(edit_type, rng.choice(STYLES))
    else:
        taken = set() if scene is None else {scene.color, scene.background}
        options = [c for c in COLORS if PALETTE[c] not in taken]
        edit = EditSpec(edit_type, rng.choice(options))
    shape = "square" if scene is None else scene.shape
    return grammar.encode(edit, shape), edit


def style_map(pixels: np.ndarray, style: str) -> np.ndarray:
    """Global colour map on ``(..., 3, h, w)`` pixel arrays."""
    if style == "invert":
        return 255.0 - pixels
    rgb = np.moveaxis(pixels.astype(np.float64), -3, -1)
    if style == "grayscale":
        y = np.rint(rgb @ np.array([0.299, 0.587, 0.114]))
        out = np.repeat(y[..., None], 3, axis=-1)
    elif style == "sepia":
        out = np.clip(np.rint(rgb @ _SEPIA.T), 0, 255)
    else:
        raise ConfigError(f"unknown style {style!r}")
    return np.moveaxis(out, -1, -3).astype(np.float32)


def apply_edit(video: VideoTensor, edit: EditSpec, mask: np.ndarray | None) -> VideoTensor:
    x = video.numpy()
    if edit.edit_type == "style_transfer":
        return VideoTensor(style_map(x, edit.payload), Domain.PIXEL)
    if mask is None:
        raise ConfigError(f"{edit.edit_type} needs the shape mask")
    if mask.shape != (x.shape[0], x.shape[2], x.shape[3]):
        raise ConfigError(f"mask shape {mask.shape} does not match video {x.shape}")
    region = mask if edit.edit_type == "attribute_modification" else ~mask
    rgb = PALETTE[edit.payload]
    for ch in range(3):
        x[:, ch][region] = rgb[ch]
    return VideoTensor(x, Domain.PIXEL)


@dataclass(frozen=True, eq=False)
class Triplet:
    input: VideoTensor
    mask: np.ndarray
    token_ids: tuple[int, ...]
    edit: EditSpec
    edited: VideoTensor


def make_triplet(rng: Rng, grammar: Grammar, ranges: SceneRanges = SceneRanges()) -> Triplet:
    scene = sample_scene(rng, ranges)
    video = gen_video(scene)
    mask = render_mask(scene)
    while True:
        ids, edit = gen_instruction(rng, grammar, scene)
        edited = apply_edit(video, edit, mask)
        if not edited.bit_equal(video):
            return Triplet(video, mask, tuple(ids), edit, edited)


def gen_triplets(n: int, seed: int, ranges: SceneRanges = SceneRanges(),
                 grammar: Grammar | None = None) -> list[Triplet]:
    if n < 1:
        raise ConfigError("need at least one triplet")
    grammar = grammar or Grammar()
    return [make_triplet(r, grammar, ranges) for r in Rng(seed).spawn(n)]


# Dataset file: magic, u32 version, u32 count, u32 JSON length, JSON config;
# then per record: input .vten, mask .vten, u32 token count + u32 ids,
# u8 edit type + u8 payload index, edited .vten.
DATA_MAGIC = b"IVVDATA\n"
DATA_VERSION = 1


def write_dataset(path, triplets: list[Triplet], config: dict) -> None:
    with open(path, "wb") as fh:
        head = json.dumps(config, sort_keys=True).encode()
        fh.write(DATA_MAGIC + struct.pack("<III", DATA_VERSION, len(triplets), len(head)) + head)
        for tr in triplets:
            write_tensor(fh, tr.input)
            write_tensor(fh, VideoTensor(tr.mask[:, None].astype(np.float32)))
            fh.write(struct.pack(f"<I{len(tr.token_ids)}I", len(tr.token_ids), *tr.token_ids))
            fh.write(struct.pack("<BB", *tr.edit.code()))
            write_tensor(fh, tr.edited)


def _read_exact(fh, n):
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError("truncated dataset file")
    return raw


def read_dataset(path) -> tuple[list[Triplet], dict]:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(DATA_MAGIC)) != DATA_MAGIC:
            raise FormatError("bad dataset magic")
        version, count, hlen = struct.unpack("<III", _read_exact(fh, 12))
        if version != DATA_VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        config = json.loads(_read_exact(fh, hlen))
        out = []
        for _ in range(count):
            video = read_tensor(fh)
            mask = read_tensor(fh).data[:, 0] > 0.5
            (k,) = struct.unpack("<I", _read_exact(fh, 4))
            ids = struct.unpack(f"<{k}I", _read_exact(fh, 4 * k))
            edit = EditSpec.from_code(*struct.unpack("<BB", _read_exact(fh, 2)))
            edited = read_tensor(fh)
            out.append(Triplet(video, mask, ids, edit, edited))
        if fh.read(1):
            raise FormatError("trailing bytes after last record")
    return out, config


def gen_dataset(n: int, seed: int, path, ranges: SceneRanges = SceneRanges()) -> list[Triplet]:
    grammar = Grammar()
    triplets = gen_triplets(n, seed, ranges, grammar)
    config = {"seed": seed, "count": n, "scene": asdict(ranges), "vocab": grammar.vocab}
    write_dataset(path, triplets, config)
    return triplets
