"""Object sources for scene generation: Omniglot glyphs and procedural shapes."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Tuple

import numpy as np
from natsort import natsorted
from PIL import Image, ImageDraw

from .config import check_keys
from .errors import ConfigurationError, IngestionError

logger = logging.getLogger(__name__)

OMNIGLOT_SPLITS = {"images_background": "background", "images_evaluation": "evaluation"}
BACKGROUND_ALPHABETS = 40
EVALUATION_ALPHABETS = 10
INSTANCES_PER_CHARACTER = 20

# scene split -> store split
OMNIGLOT_SPLIT_OF = {"train": "background", "test": "evaluation"}

INK_RGB = (30, 30, 30)
CUE_RED = (255, 0, 0)
CUE_GREEN = (0, 255, 0)
BACKGROUND_RGB = (200, 200, 200)

SHAPE_COUNT = 12
TRAIN_SHAPE_COUNT = 8


@dataclass(frozen=True)
class Sprite:
    """One rendered object instance: colors plus the mask of its pixels."""

    identity: str
    instance: int
    pixels: np.ndarray
    mask: np.ndarray

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def size(self) -> int:
        return max(self.height, self.width)


class ObjectStore(Protocol):
    protocol: str

    def identities(self, split: str) -> List[str]: ...

    def instances(self, identity: str) -> int: ...

    def sprite(self, identity: str, instance: int, size: int) -> Sprite: ...


def _check_split(split):
    if split not in ("train", "test"):
        raise ConfigurationError(f"Unknown split '{split}', expected 'train' or 'test'")


def _crop_to_mask(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return mask[:1, :1]
    return mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


# ------------------------------------------------------------------ Omniglot

@dataclass
class GlyphStore:
    """Omniglot characters keyed ``"<alphabet>/<character>"``, 20 glyph files each.

    Images are decoded the first time one of a character's glyphs is drawn.
    """

    paths: Dict[str, List[str]]
    splits: Dict[str, str]
    root: Optional[str] = None
    protocol: str = "omniglot"
    _ink: Dict[str, List[np.ndarray]] = field(default_factory=dict, repr=False)
    _cache: Dict[Tuple[str, int, int], Sprite] = field(default_factory=dict, repr=False)

    def alphabets(self, split: Optional[str] = None) -> List[str]:
        return natsorted(a for a, s in self.splits.items() if split is None or s == split)

    def identities(self, split: str) -> List[str]:
        _check_split(split)
        wanted = OMNIGLOT_SPLIT_OF[split]
        return natsorted(i for i in self.paths if self.splits[i.split("/", 1)[0]] == wanted)

    def instances(self, identity: str) -> int:
        return len(self.paths[identity])

    @property
    def decoded(self) -> List[str]:
        return natsorted(self._ink)

    def glyphs(self, identity: str) -> List[np.ndarray]:
        """Ink masks of one character, each cropped to its strokes."""
        if identity not in self._ink:
            self._ink[identity] = [_crop_to_mask(_read_glyph(p)) for p in self.paths[identity]]
            logger.debug(f"Decoded {identity} ({len(self._ink)} characters in memory)")
        return self._ink[identity]

    def sprite(self, identity: str, instance: int, size: int) -> Sprite:
        """Glyph cropped to its ink and scaled to fit a size×size box."""
        key = (identity, instance, size)
        if key not in self._cache:
            ink = self.glyphs(identity)[instance]
            scale = size / max(ink.shape)
            h, w = max(1, int(round(ink.shape[0] * scale))), max(1, int(round(ink.shape[1] * scale)))
            resized = Image.fromarray((ink * 255).astype(np.uint8), "L").resize((w, h), Image.BILINEAR)
            mask = _crop_to_mask(np.asarray(resized) >= 96)
            pixels = np.empty(mask.shape + (3,), dtype=np.uint8)
            pixels[:] = INK_RGB
            self._cache[key] = Sprite(identity, instance, pixels, mask)
        return self._cache[key]


def _read_glyph(path):
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except (OSError, ValueError) as e:
        raise IngestionError(path, f"Unreadable image ({e})") from e
    # strokes are dark on a white background
    ink = arr < 128
    if not ink.any():
        raise IngestionError(path, "Glyph image contains no ink")
    return ink


def load_omniglot(root, strict: bool = True) -> GlyphStore:
    """Ingest the published Omniglot layout.

    ``root`` must contain ``images_background/`` and ``images_evaluation/``,
    each holding ``<alphabet>/<character>/*.png``. With ``strict`` the
    alphabet counts must be 40 and 10. The layout is checked here; the
    images themselves are read on first use.
    """
    if not root or not os.path.isdir(root):
        raise IngestionError(root, "Omniglot root directory not found")

    paths, splits = {}, {}
    for split_dir, split in OMNIGLOT_SPLITS.items():
        split_path = os.path.join(root, split_dir)
        if not os.path.isdir(split_path):
            raise IngestionError(split_path, "Missing Omniglot split directory")
        alphabets = natsorted(d for d in os.listdir(split_path) if os.path.isdir(os.path.join(split_path, d)))
        if not alphabets:
            raise IngestionError(split_path, "No alphabets found")
        for alphabet in alphabets:
            if alphabet in splits:
                raise IngestionError(os.path.join(split_path, alphabet), "Alphabet appears in both splits")
            splits[alphabet] = split
            alphabet_path = os.path.join(split_path, alphabet)
            characters = natsorted(
                d for d in os.listdir(alphabet_path) if os.path.isdir(os.path.join(alphabet_path, d))
            )
            if not characters:
                raise IngestionError(alphabet_path, "No characters found")
            for character in characters:
                char_path = os.path.join(alphabet_path, character)
                files = natsorted(f for f in os.listdir(char_path) if f.lower().endswith(".png"))
                if len(files) != INSTANCES_PER_CHARACTER:
                    raise IngestionError(
                        char_path, f"Expected {INSTANCES_PER_CHARACTER} instances, found {len(files)}"
                    )
                paths[f"{alphabet}/{character}"] = [os.path.join(char_path, f) for f in files]

    counts = {s: sum(1 for v in splits.values() if v == s) for s in OMNIGLOT_SPLITS.values()}
    if strict and (counts["background"], counts["evaluation"]) != (BACKGROUND_ALPHABETS, EVALUATION_ALPHABETS):
        raise IngestionError(
            root,
            f"Expected {BACKGROUND_ALPHABETS} background and {EVALUATION_ALPHABETS} evaluation alphabets, "
            f"found {counts['background']} and {counts['evaluation']}",
        )
    logger.info(
        f"Loaded Omniglot from {root}: {counts['background']} background / "
        f"{counts['evaluation']} evaluation alphabets, {len(paths)} characters"
    )
    return GlyphStore(paths=paths, splits=splits, root=os.path.abspath(root))


# -------------------------------------------------------------------- shapes

@dataclass(frozen=True)
class ShapeConfig:
    train_colors: int = 384
    test_colors: int = 128

    def __post_init__(self):
        if self.train_colors < 1 or self.test_colors < 1:
            raise ConfigurationError("Color counts must be positive")
        if self.train_colors + self.test_colors > 4096:
            raise ConfigurationError("At most 4096 colors in total are supported")

    @classmethod
    def for_variant(cls, variant: str) -> "ShapeConfig":
        if variant == "full":
            return cls()
        if variant == "truncated":
            return cls(train_colors=48, test_colors=12)
        raise ConfigurationError(f"Unknown shapes variant '{variant}', expected 'full' or 'truncated'")

    def to_dict(self):
        return {"train_colors": self.train_colors, "test_colors": self.test_colors}

    @classmethod
    def from_dict(cls, data):
        check_keys("shapes", data, ("train_colors", "test_colors"))
        return cls(**data)


@dataclass
class ShapeStore:
    """Twelve convex outlines painted with disjoint train/test palettes."""

    outlines: List[np.ndarray]
    train_shapes: List[int]
    test_shapes: List[int]
    train_palette: np.ndarray
    test_palette: np.ndarray
    seed: int = 0
    protocol: str = "shapes"
    _cache: Dict[Tuple[str, int], Sprite] = field(default_factory=dict, repr=False)

    def identities(self, split: str) -> List[str]:
        _check_split(split)
        shapes = self.train_shapes if split == "train" else self.test_shapes
        palette = self.train_palette if split == "train" else self.test_palette
        return [f"{split}/shape{s:02d}/color{c:03d}" for s in shapes for c in range(len(palette))]

    def instances(self, identity: str) -> int:
        return 1

    def describe(self, identity: str) -> Tuple[int, Tuple[int, int, int]]:
        split, shape, color = identity.split("/")
        palette = self.train_palette if split == "train" else self.test_palette
        return int(shape[len("shape"):]), tuple(int(v) for v in palette[int(color[len("color"):])])

    def sprite(self, identity: str, instance: int, size: int) -> Sprite:
        key = (identity, size)
        if key not in self._cache:
            shape, rgb = self.describe(identity)
            outline = self.outlines[shape] * (size - 1)
            img = Image.new("L", (size, size), 0)
            ImageDraw.Draw(img).polygon([(float(c), float(r)) for r, c in outline], fill=255)
            mask = _crop_to_mask(np.asarray(img) > 0)
            pixels = np.empty(mask.shape + (3,), dtype=np.uint8)
            pixels[:] = rgb
            self._cache[key] = Sprite(identity, 0, pixels, mask)
        return self._cache[key]


def _outline(rng):
    """Convex polygon from points on a rotated ellipse, fitted to the unit box (row, col)."""
    sides = int(rng.choice([4, 4, 5, 6, 8]))
    angles = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.arange(sides) / sides
    angles += rng.uniform(-0.3, 0.3, size=sides) * np.pi / sides
    a, b = 1.0, rng.uniform(0.55, 1.0)
    theta = rng.uniform(0, np.pi)
    x, y = a * np.cos(angles), b * np.sin(angles)
    pts = np.stack([x * np.cos(theta) - y * np.sin(theta), x * np.sin(theta) + y * np.cos(theta)], axis=1)
    pts -= pts.min(axis=0)
    return pts / pts.max()


def _palette(rng, count):
    """Distinct colors kept away from the canvas, the ink and both cue colors."""
    avoid = np.array([BACKGROUND_RGB, INK_RGB, CUE_RED, CUE_GREEN], dtype=float)
    colors, seen = [], set()
    while len(colors) < count:
        c = rng.integers(0, 256, size=3)
        if tuple(c) in seen or np.min(np.linalg.norm(avoid - c, axis=1)) < 60:
            continue
        seen.add(tuple(c))
        colors.append(c)
    return np.array(colors, dtype=np.uint8)


def gen_shapes(config: Optional[ShapeConfig] = None, seed: int = 0) -> ShapeStore:
    """Deterministic shape store; truncated palettes are prefixes of the full ones."""
    config = config or ShapeConfig()
    rng = np.random.default_rng(seed)
    outlines = [_outline(rng) for _ in range(SHAPE_COUNT)]
    order = [int(i) for i in rng.permutation(SHAPE_COUNT)]
    full = ShapeConfig()
    palette = _palette(rng, max(full.train_colors + full.test_colors, config.train_colors + config.test_colors))
    train_palette = palette[:max(full.train_colors, config.train_colors)][:config.train_colors]
    test_palette = palette[max(full.train_colors, config.train_colors):][:config.test_colors]
    store = ShapeStore(
        outlines=outlines,
        train_shapes=sorted(order[:TRAIN_SHAPE_COUNT]),
        test_shapes=sorted(order[TRAIN_SHAPE_COUNT:]),
        train_palette=train_palette,
        test_palette=test_palette,
        seed=seed,
    )
    logger.debug(
        f"Generated shapes store (seed {seed}): {len(store.identities('train'))} train / "
        f"{len(store.identities('test'))} test objects"
    )
    return store


def open_store(protocol: str, omniglot_root=None, shapes_variant: str = "full", shapes_seed: int = 0, strict: bool = True):
    """The object store a protocol draws from."""
    if protocol == "omniglot":
        if not omniglot_root:
            raise IngestionError("<unset>", "No Omniglot root given (use --omniglot-root or CUEHUNT_OMNIGLOT_ROOT)")
        return load_omniglot(omniglot_root, strict=strict)
    if protocol == "shapes":
        return gen_shapes(ShapeConfig.for_variant(shapes_variant), seed=shapes_seed)
    raise ConfigurationError(f"Unknown protocol '{protocol}', expected 'omniglot' or 'shapes'")
