import os

import numpy as np
import pytest
from PIL import Image, ImageDraw

from cuehunt.model import ArchitectureConfig, init_params
from cuehunt.stores import ShapeConfig, gen_shapes, load_omniglot

GLYPH_SIZE = 105
DRAWERS = 20


def _glyph_png(path, rng):
    """White 105×105 image with a few dark random strokes."""
    img = Image.new("L", (GLYPH_SIZE, GLYPH_SIZE), 255)
    draw = ImageDraw.Draw(img)
    for _ in range(3):
        points = [tuple(int(v) for v in rng.integers(15, 90, size=2)) for _ in range(3)]
        draw.line(points, fill=0, width=4)
    img.save(path, format="PNG")


def make_omniglot_tree(root, background=3, evaluation=2, characters=3, seed=0):
    """Small Omniglot-shaped tree: <split>/<alphabet>/<character>/<drawer>.png."""
    rng = np.random.default_rng(seed)
    layout = {"images_background": background, "images_evaluation": evaluation}
    offset = 0
    for split_dir, alphabets in layout.items():
        for a in range(alphabets):
            for c in range(characters):
                char_dir = os.path.join(root, split_dir, f"Alphabet_{offset + a + 1}", f"character{c + 1:02d}")
                os.makedirs(char_dir)
                for d in range(DRAWERS):
                    _glyph_png(os.path.join(char_dir, f"{c + 1:04d}_{d + 1:02d}.png"), rng)
        offset += alphabets
    return str(root)


@pytest.fixture(scope="session")
def omniglot_root(tmp_path_factory):
    return make_omniglot_tree(tmp_path_factory.mktemp("omniglot"))


@pytest.fixture(scope="session")
def glyph_store(omniglot_root):
    return load_omniglot(omniglot_root, strict=False)


@pytest.fixture(scope="session")
def shape_store():
    return gen_shapes(ShapeConfig(), seed=0)


@pytest.fixture(scope="session")
def truncated_store():
    return gen_shapes(ShapeConfig.for_variant("truncated"), seed=0)


@pytest.fixture
def tiny_arch():
    return ArchitectureConfig.tiny()


@pytest.fixture
def tiny_params(tiny_arch):
    return init_params(tiny_arch, seed=0)


@pytest.fixture
def omniglot_factory(tmp_path):
    """Build a throwaway tree with custom alphabet counts."""

    def build(**kwargs):
        return make_omniglot_tree(tmp_path / "omniglot", **kwargs)

    return build
