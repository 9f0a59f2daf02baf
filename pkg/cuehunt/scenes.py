"""Adaptation/target scene composition, episode streams and episode archives."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from itertools import islice
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from natsort import natsorted
from PIL import Image, ImageDraw

from .config import check_keys
from .errors import ConfigurationError, GenerationError, IngestionError
from .stores import BACKGROUND_RGB, CUE_GREEN, CUE_RED, ObjectStore, Sprite

logger = logging.getLogger(__name__)

CUE_KINDS = ("red-dot", "green-marker")
CUE_ALIASES = {"red": "red-dot", "green": "green-marker"}
MAX_PLACEMENT_RETRIES = 1000
OBJECTS_PER_SCENE = 4
REFERENCE_CANVAS = 150

Point = Tuple[float, float]


def _scaled(value: float, size: int) -> int:
    return max(1, int(round(value * size / REFERENCE_CANVAS)))


def normalize_point(row: float, col: float, height: int, width: int) -> Point:
    """Pixel position to (x, y) in [0, 1]², x along rows."""
    x = row / (height - 1) if height > 1 else 0.5
    y = col / (width - 1) if width > 1 else 0.5
    return float(x), float(y)


@dataclass(frozen=True)
class CueSpec:
    kind: str = "red-dot"
    radius: Optional[int] = None
    jitter: float = 0.0

    def __post_init__(self):
        kind = CUE_ALIASES.get(self.kind, self.kind)
        if kind not in CUE_KINDS:
            raise ConfigurationError(f"Unknown cue kind '{self.kind}', expected one of {', '.join(CUE_KINDS)}")
        object.__setattr__(self, "kind", kind)
        if not 0.0 <= self.jitter < 1.0:
            raise ConfigurationError(f"Cue jitter must lie in [0, 1), got {self.jitter}")
        if self.radius is not None and self.radius < 1:
            raise ConfigurationError(f"Cue radius must be at least 1 px, got {self.radius}")

    def dot_radius(self, canvas_size: int) -> int:
        return self.radius if self.radius is not None else _scaled(3, canvas_size)

    def marker_radius(self, object_size: int) -> int:
        return self.radius if self.radius is not None else max(1, int(round(object_size / 4)))

    def to_dict(self):
        return {"kind": self.kind, "radius": self.radius, "jitter": self.jitter}

    @classmethod
    def from_dict(cls, data):
        check_keys("cue", data, ("kind", "radius", "jitter"))
        return cls(**data)


@dataclass(frozen=True)
class Canvas:
    size: int = REFERENCE_CANVAS
    object_size: Optional[int] = None
    background: Tuple[int, int, int] = BACKGROUND_RGB

    def __post_init__(self):
        if self.size < 8:
            raise ConfigurationError(f"Canvas size must be at least 8 px, got {self.size}")
        if self.object_size is None:
            object.__setattr__(self, "object_size", _scaled(40, self.size))
        if not 1 <= self.object_size <= self.size:
            raise ConfigurationError(f"Object size {self.object_size} does not fit a {self.size} px canvas")
        object.__setattr__(self, "background", tuple(int(v) for v in self.background))

    @property
    def marker_gap(self) -> int:
        return _scaled(2, self.size)

    def blank(self) -> np.ndarray:
        image = np.empty((self.size, self.size, 3), dtype=np.uint8)
        image[:] = self.background
        return image

    def to_dict(self):
        return {"size": self.size, "object_size": self.object_size, "background": list(self.background)}

    @classmethod
    def from_dict(cls, data):
        check_keys("canvas", data, ("size", "object_size", "background"))
        return cls(**data)


@dataclass(frozen=True)
class Placement:
    identity: str
    instance: int
    top: int
    left: int
    height: int
    width: int

    @property
    def center(self) -> Point:
        return self.top + (self.height - 1) / 2.0, self.left + (self.width - 1) / 2.0

    @property
    def center_pixel(self) -> Tuple[int, int]:
        return self.top + (self.height - 1) // 2, self.left + (self.width - 1) // 2

    @property
    def bbox(self) -> Tuple[int, int, int, int]:
        """Inclusive (top, left, bottom, right)."""
        return self.top, self.left, self.top + self.height - 1, self.left + self.width - 1

    def contains(self, row: float, col: float) -> bool:
        top, left, bottom, right = self.bbox
        return top <= row <= bottom and left <= col <= right

    def overlaps(self, other: "Placement") -> bool:
        return _boxes_overlap(self.bbox, other.bbox)

    def normalized_center(self, canvas_size: int) -> Point:
        return normalize_point(*self.center, canvas_size, canvas_size)

    def to_dict(self):
        return {
            "identity": self.identity,
            "instance": self.instance,
            "top": self.top,
            "left": self.left,
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def _boxes_overlap(a, b):
    return not (a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1])


def _place(sprites: Sequence[Sprite], canvas: Canvas, rng, headroom: Optional[Dict[int, int]] = None):
    """Rejection-sample non-overlapping positions; ``headroom`` reserves rows above chosen sprites."""
    headroom = headroom or {}
    placed, footprints = [], []
    for idx, sprite in enumerate(sprites):
        extra = headroom.get(idx, 0)
        max_top, max_left = canvas.size - sprite.height, canvas.size - sprite.width
        if max_top < extra or max_left < 0:
            raise GenerationError(f"Object {sprite.identity} ({sprite.height}×{sprite.width}) does not fit the canvas")
        for _ in range(MAX_PLACEMENT_RETRIES):
            top = int(rng.integers(extra, max_top + 1))
            left = int(rng.integers(0, max_left + 1))
            footprint = (top - extra, left, top + sprite.height - 1, left + sprite.width - 1)
            if not any(_boxes_overlap(footprint, other) for other in footprints):
                break
        else:
            raise GenerationError(
                f"Could not place {len(sprites)} objects of size {canvas.object_size} on a "
                f"{canvas.size}×{canvas.size} canvas after {MAX_PLACEMENT_RETRIES} retries"
            )
        footprints.append(footprint)
        placed.append(Placement(sprite.identity, sprite.instance, top, left, sprite.height, sprite.width))
    return placed


def _paint(canvas: Canvas, sprites: Sequence[Sprite], placements: Sequence[Placement]) -> np.ndarray:
    image = canvas.blank()
    for sprite, p in zip(sprites, placements):
        region = image[p.top:p.top + p.height, p.left:p.left + p.width]
        region[sprite.mask] = sprite.pixels[sprite.mask]
    return image


def _disc(image: np.ndarray, row: int, col: int, radius: int, rgb) -> np.ndarray:
    img = Image.fromarray(image)
    ImageDraw.Draw(img).ellipse([col - radius, row - radius, col + radius, row + radius], fill=tuple(rgb))
    return np.asarray(img).copy()


@dataclass
class AdaptationScene:
    image: np.ndarray
    placements: List[Placement]
    cued_index: int
    cue: Dict[str, object]

    @property
    def cued(self) -> Placement:
        return self.placements[self.cued_index]


@dataclass
class TargetScene:
    image: np.ndarray
    placements: List[Placement]
    cued_index: int
    label: Point

    @property
    def cued(self) -> Placement:
        return self.placements[self.cued_index]


def compose_adaptation(objects: Sequence[Sprite], cue: CueSpec, canvas: Canvas, rng, cued_index: Optional[int] = None) -> AdaptationScene:
    """Place four distinct objects and mark one of them with the cue."""
    identities = [s.identity for s in objects]
    if len(objects) != OBJECTS_PER_SCENE or len(set(identities)) != OBJECTS_PER_SCENE:
        raise ConfigurationError(f"Adaptation scenes need {OBJECTS_PER_SCENE} distinct objects, got {identities}")
    if cued_index is None:
        cued_index = int(rng.integers(OBJECTS_PER_SCENE))

    headroom = {}
    if cue.kind == "green-marker":
        radius = cue.marker_radius(objects[cued_index].size)
        headroom[cued_index] = 2 * radius + 1 + canvas.marker_gap
    placements = _place(objects, canvas, rng, headroom)
    image = _paint(canvas, objects, placements)
    target = placements[cued_index]
    c_row, c_col = target.center_pixel

    if cue.kind == "red-dot":
        radius = cue.dot_radius(canvas.size)
        reach = cue.jitter * max(target.height, target.width)
        d_row = int(np.rint(rng.uniform(-reach, reach))) if reach > 0 else 0
        d_col = int(np.rint(rng.uniform(-reach, reach))) if reach > 0 else 0
        row = min(max(c_row + d_row, 0), canvas.size - 1)
        col = min(max(c_col + d_col, 0), canvas.size - 1)
        image = _disc(image, row, col, radius, CUE_RED)
    else:
        row = target.top - canvas.marker_gap - 1 - radius
        col = c_col
        image = _disc(image, row, col, radius, CUE_GREEN)

    cue_meta = {
        "kind": cue.kind,
        "row": int(row),
        "col": int(col),
        "offset_row": int(row - c_row),
        "offset_col": int(col - c_col),
        "radius": int(radius),
    }
    return AdaptationScene(image=image, placements=placements, cued_index=cued_index, cue=cue_meta)


@dataclass(frozen=True)
class DistractorPool:
    """Where target distractors come from: objects already shown, or new ones."""

    shown: Tuple[str, ...]
    fresh: Tuple[str, ...]


def choose_distractors(pool: DistractorPool, cued_identity: str, rng, count: int = OBJECTS_PER_SCENE - 1) -> List[str]:
    """Each slot reuses a previously shown object or a new one with equal odds.

    The cued identity is never drawn, so it appears exactly once in the target.
    """
    shown = [i for i in pool.shown if i != cued_identity]
    fresh = [i for i in pool.fresh if i != cued_identity]
    chosen = []
    for _ in range(count):
        source = shown if shown and (not fresh or rng.random() < 0.5) else fresh
        if not source:
            raise GenerationError(f"Not enough identities to draw {count} distractors")
        chosen.append(source.pop(int(rng.integers(len(source)))))
    return chosen


def _instance(store: ObjectStore, identity: str, rng, avoid: Optional[int] = None) -> int:
    n = store.instances(identity)
    if avoid is None or n == 1:
        return int(rng.integers(n))
    pick = int(rng.integers(n - 1))
    return pick + 1 if pick >= avoid else pick


def compose_target(
    store: ObjectStore,
    cued_identity: str,
    pool: DistractorPool,
    canvas: Canvas,
    rng,
    avoid_instance: Optional[int] = None,
) -> TargetScene:
    """A fresh instance of the cued object among three distractors; the label is its center."""
    distractors = choose_distractors(pool, cued_identity, rng)
    identities = [cued_identity] + distractors
    order = [int(i) for i in rng.permutation(len(identities))]
    sprites = []
    for idx in order:
        identity = identities[idx]
        instance = _instance(store, identity, rng, avoid_instance if idx == 0 else None)
        sprites.append(store.sprite(identity, instance, canvas.object_size))
    placements = _place(sprites, canvas, rng)
    cued_index = order.index(0)
    label = placements[cued_index].normalized_center(canvas.size)
    return TargetScene(
        image=_paint(canvas, sprites, placements),
        placements=placements,
        cued_index=cued_index,
        label=label,
    )


@dataclass
class Episode:
    episode_id: str
    adapt: np.ndarray
    target: np.ndarray
    label: Point
    meta: Dict[str, object] = field(default_factory=dict)

    def adapt_chw(self, dtype=np.float64) -> np.ndarray:
        return _to_chw(self.adapt, dtype)

    def target_chw(self, dtype=np.float64) -> np.ndarray:
        return _to_chw(self.target, dtype)

    def placements(self, which: str = "target") -> List[Placement]:
        return [Placement.from_dict(p) for p in self.meta[which]["objects"]]

    def cued_placement(self, which: str = "target") -> Placement:
        return self.placements(which)[self.meta[which]["cued_index"]]


def _to_chw(image, dtype):
    return (np.asarray(image, dtype=np.float64).transpose(2, 0, 1) / 255.0).astype(dtype)


def episode_id(protocol: str, split: str, seed: int, stream: int, index: int) -> str:
    return f"{protocol}-{split}-s{seed}-r{stream}-{index:06d}"


def make_episode(
    store: ObjectStore,
    split: str,
    cue: CueSpec,
    canvas: Canvas,
    seed: int,
    stream: int,
    index: int,
    identities: Optional[Sequence[str]] = None,
) -> Episode:
    """Episode ``index`` of a stream; depends only on its arguments."""
    if min(seed, stream, index) < 0:
        raise ConfigurationError("Seed, stream and index must be non-negative")
    identities = list(identities) if identities is not None else store.identities(split)
    if len(identities) < OBJECTS_PER_SCENE:
        raise GenerationError(
            f"Split '{split}' of the {store.protocol} store has {len(identities)} identities, "
            f"at least {OBJECTS_PER_SCENE} needed"
        )
    rng = np.random.default_rng((seed, stream, index))
    picked = [identities[int(i)] for i in rng.choice(len(identities), size=OBJECTS_PER_SCENE, replace=False)]
    sprites = [store.sprite(i, _instance(store, i, rng), canvas.object_size) for i in picked]
    adapt = compose_adaptation(sprites, cue, canvas, rng)
    cued = adapt.cued

    shown = set(picked)
    fresh_idx = rng.choice(len(identities), size=min(len(identities), 3 * OBJECTS_PER_SCENE), replace=False)
    fresh = tuple(identities[int(i)] for i in fresh_idx if identities[int(i)] not in shown)
    pool = DistractorPool(shown=tuple(picked), fresh=fresh)
    target = compose_target(store, cued.identity, pool, canvas, rng, avoid_instance=cued.instance)

    meta = {
        "episode_id": episode_id(store.protocol, split, seed, stream, index),
        "protocol": store.protocol,
        "split": split,
        "seed": seed,
        "stream": stream,
        "index": index,
        "canvas": canvas.to_dict(),
        "label_x": target.label[0],
        "label_y": target.label[1],
        "adapt": {
            "objects": [p.to_dict() for p in adapt.placements],
            "cued_index": adapt.cued_index,
            "cue": adapt.cue,
        },
        "target": {
            "objects": [p.to_dict() for p in target.placements],
            "cued_index": target.cued_index,
        },
    }
    return Episode(meta["episode_id"], adapt.image, target.image, target.label, meta)


def episode_stream(
    store: ObjectStore,
    split: str,
    cue: CueSpec,
    seed: int,
    canvas: Optional[Canvas] = None,
    stream: int = 0,
    start: int = 0,
) -> Iterator[Episode]:
    """Endless reproducible sequence of episodes drawn from one split."""
    canvas = canvas or Canvas()
    identities = store.identities(split)
    if not identities:
        raise GenerationError(f"Split '{split}' of the {store.protocol} store is empty")
    index = start
    while True:
        yield make_episode(store, split, cue, canvas, seed, stream, index, identities=identities)
        index += 1


def take(stream: Iterator[Episode], n: int) -> List[Episode]:
    return list(islice(stream, n))


# ------------------------------------------------------------------ archive

def _save_png(path, image):
    Image.fromarray(np.asarray(image, dtype=np.uint8), "RGB").save(path, format="PNG")


def write_archive(episodes, out_dir) -> List[str]:
    """One directory per episode with adapt.png, target.png and meta.json."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for n, ep in enumerate(episodes):
        ep_dir = os.path.join(out_dir, f"episode_{n:06d}")
        os.makedirs(ep_dir, exist_ok=True)
        _save_png(os.path.join(ep_dir, "adapt.png"), ep.adapt)
        _save_png(os.path.join(ep_dir, "target.png"), ep.target)
        with open(os.path.join(ep_dir, "meta.json"), "w", encoding="utf-8") as f:
            json.dump(ep.meta, f, sort_keys=True, indent=2)
            f.write("\n")
        written.append(ep_dir)
    logger.info(f"Wrote {len(written)} episodes to {out_dir}")
    return written


def _load_png(path):
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB")).copy()
    except (OSError, ValueError) as e:
        raise IngestionError(path, f"Unreadable image ({e})") from e


def read_archive(archive_dir) -> List[Episode]:
    if not os.path.isdir(archive_dir):
        raise FileNotFoundError(f"Episode archive not found at {archive_dir}")
    episodes = []
    for name in natsorted(os.listdir(archive_dir)):
        ep_dir = os.path.join(archive_dir, name)
        if not (name.startswith("episode_") and os.path.isdir(ep_dir)):
            continue
        meta_path = os.path.join(ep_dir, "meta.json")
        if not os.path.exists(meta_path):
            raise IngestionError(meta_path, "Missing episode metadata")
        with open(meta_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
        episodes.append(Episode(
            episode_id=meta["episode_id"],
            adapt=_load_png(os.path.join(ep_dir, "adapt.png")),
            target=_load_png(os.path.join(ep_dir, "target.png")),
            label=(meta["label_x"], meta["label_y"]),
            meta=meta,
        ))
    return episodes


def archive_digest(archive_dir) -> str:
    """SHA-256 over every file of an archive, in natural path order."""
    h = hashlib.sha256()
    paths = []
    for dirpath, _, filenames in os.walk(archive_dir):
        paths.extend(os.path.join(dirpath, f) for f in filenames)
    for path in natsorted(paths):
        h.update(os.path.relpath(path, archive_dir).encode())
        with open(path, "rb") as f:
            h.update(f.read())
    return h.hexdigest()


def episode_digest(episodes) -> str:
    h = hashlib.sha256()
    for ep in episodes:
        h.update(np.ascontiguousarray(ep.adapt).tobytes())
        h.update(np.ascontiguousarray(ep.target).tobytes())
        h.update(np.asarray(ep.label, dtype=np.float64).tobytes())
    return h.hexdigest()
