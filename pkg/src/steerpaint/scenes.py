"""Procedural (image, mask, prompt) scenes and the identity latent codec."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "COLORS",
    "COLOR_NAMES",
    "SHAPES",
    "NULL_TOKEN",
    "VOCAB_SIZE",
    "PROMPT_LEN",
    "IMAGE_SIZE",
    "Scene",
    "color_token",
    "shape_token",
    "make_prompt",
    "decode_prompt",
    "render_shape",
    "generate_scene",
    "generate_corpus",
    "encode",
    "decode",
    "masked_latent",
    "downsample_mask",
    "upsample_mask",
]

IMAGE_SIZE = 32
PROMPT_LEN = 4
NULL_TOKEN = 0

COLOR_NAMES = ("red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white")
COLORS = np.array(
    [
        [0.95, 0.10, 0.10],
        [0.10, 0.85, 0.15],
        [0.15, 0.25, 0.95],
        [0.95, 0.90, 0.10],
        [0.10, 0.90, 0.90],
        [0.90, 0.15, 0.90],
        [1.00, 0.55, 0.05],
        [0.97, 0.97, 0.97],
    ]
)
SHAPES = ("square", "circle", "triangle", "diamond", "cross", "ring")
VOCAB_SIZE = 1 + len(COLOR_NAMES) + len(SHAPES)


def color_token(color: int) -> int:
    return 1 + color


def shape_token(shape: int) -> int:
    return 1 + len(COLOR_NAMES) + shape


def make_prompt(color: int, shape: int) -> np.ndarray:
    p = np.full(PROMPT_LEN, NULL_TOKEN, dtype=np.int64)
    p[0], p[1] = color_token(color), shape_token(shape)
    return p


def decode_prompt(prompt) -> tuple[int, int]:
    """Return (color id, shape id) named by a prompt; -1 where absent."""
    color = shape = -1
    for tok in np.asarray(prompt):
        if 1 <= tok <= len(COLOR_NAMES):
            color = int(tok) - 1
        elif tok > len(COLOR_NAMES):
            shape = int(tok) - 1 - len(COLOR_NAMES)
    return color, shape


@dataclass(frozen=True)
class Scene:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) in {0, 1}; 1 marks the region to repaint
    prompt: np.ndarray  # (PROMPT_LEN,) token ids
    color: int
    shape: int
    mode: str
    seed: int


def render_shape(shape: int, cy: float, cx: float, half: float, size: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean silhouette of ``SHAPES[shape]`` centred at (cy, cx)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    name = SHAPES[shape]
    if name == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if name == "circle":
        return dx * dx + dy * dy <= half * half
    if name == "triangle":
        inside_y = (dy >= -half) & (dy <= half)
        return inside_y & (np.abs(dx) <= (dy + half) / 2.0 + 0.5)
    if name == "diamond":
        return np.abs(dx) + np.abs(dy) <= half
    if name == "cross":
        arm = max(half / 3.0, 1.0)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= half)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= half)
        )
    if name == "ring":
        r2 = dx * dx + dy * dy
        return (r2 <= half * half) & (r2 >= (0.5 * half) ** 2)
    raise ValueError(f"unknown shape {shape}")


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(r):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.2, 0.42) + rng.uniform(-0.06, 0.06, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    angle = rng.uniform(0, 2 * np.pi)
    freq = rng.uniform(1.0, 3.0)
    wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + rng.uniform(0, 2 * np.pi))
    img = base[None, None, :] + 0.05 * wave[..., None] + rng.normal(0, 0.01, size=(size, size, 3))
    return np.clip(img, 0.0, 1.0)


def _stroke_mask(rng: np.random.Generator, cy: float, cx: float, size: int) -> np.ndarray:
    out = np.zeros((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(2, 4)):
        angle = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(6, 14)
        width = rng.uniform(1.5, 2.5)
        for s in np.linspace(0, length, 24):
            py, px = cy + s * np.sin(angle), cx + s * np.cos(angle)
            out |= (yy - py) ** 2 + (xx - px) ** 2 <= width**2
    return out


def generate_scene(seed: int, mode: str = "object_aligned", color: int | None = None,
                   shape: int | None = None, size: int = IMAGE_SIZE) -> Scene:
    """Render one coloured shape on a textured background, deterministically per seed.

    Both mask modes cover every object pixel: ``object_aligned`` is the object's
    bounding box grown by one pixel, ``freeform`` is the silhouette grown by one
    pixel plus random thick strokes through it.
    """
    if mode not in ("object_aligned", "freeform"):
        raise ValueError(f"unknown mask mode {mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE7E]))
    pick_color = int(rng.integers(len(COLOR_NAMES)))
    pick_shape = int(rng.integers(len(SHAPES)))
    color = pick_color if color is None else int(color)
    shape = pick_shape if shape is None else int(shape)
    half = float(rng.uniform(5.0, 7.5))
    margin = half + 2.0
    cy, cx = rng.uniform(margin, size - 1 - margin, size=2)
    image = _background(rng, size)
    obj = render_shape(shape, cy, cx, half, size)
    tint = np.clip(COLORS[color] + rng.uniform(-0.04, 0.04, size=3), 0.0, 1.0)
    image[obj] = tint
    if mode == "object_aligned":
        ys, xs = np.nonzero(obj)
        mask = np.zeros((size, size), dtype=bool)
        mask[max(ys.min() - 1, 0): ys.max() + 2, max(xs.min() - 1, 0): xs.max() + 2] = True
    else:
        mask = _dilate(obj, 1) | _stroke_mask(rng, cy, cx, size)
    return Scene(
        image=image,
        mask=mask.astype(np.float64),
        prompt=make_prompt(color, shape),
        color=color,
        shape=shape,
        mode=mode,
        seed=int(seed),
    )


def generate_corpus(n: int, seed: int, object_aligned_frac: float = 0.45) -> list[Scene]:
    """Balanced training corpus: (color, shape) pairs cycle through a seeded permutation."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0495]))
    n_pairs = len(COLOR_NAMES) * len(SHAPES)
    pairs = np.concatenate([rng.permutation(n_pairs) for _ in range(n // n_pairs + 1)])[:n]
    modes = rng.random(n) < object_aligned_frac
    scene_seeds = rng.integers(0, 2**31 - 1, size=n)
    return [
        generate_scene(
            int(s), "object_aligned" if m else "freeform",
            color=int(p) // len(SHAPES), shape=int(p) % len(SHAPES),
        )
        for s, m, p in zip(scene_seeds, modes, pairs)
    ]


# -- identity codec ------------------------------------------------------
def encode(image: np.ndarray) -> np.ndarray:
    """Image -> latent. The toy codec is the identity on the 32x32x3 grid."""
    return np.asarray(image, dtype=np.float64)


def decode(latent: np.ndarray) -> np.ndarray:
    return np.asarray(latent, dtype=np.float64)


def masked_latent(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Latent of the known content, ``E(I * (1 - M))``."""
    return encode(image * (1.0 - mask[..., None]))


def downsample_mask(mask: np.ndarray, factor: int = 4) -> np.ndarray:
    """Nearest-neighbour downsample (samples each cell's centre pixel).

    Falls back to any-overlap pooling if sampling would drop a nonempty mask.
    """
    mask = np.asarray(mask, dtype=np.float64)
    off = factor // 2
    out = mask[off::factor, off::factor].copy()
    if out.sum() == 0 and mask.sum() > 0:
        h, w = mask.shape
        out = mask.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))
    return out


def upsample_mask(mask: np.ndarray, factor: int = 4) -> np.ndarray:
    return np.kron(np.asarray(mask, dtype=np.float64), np.ones((factor, factor)))
