import numpy as np
import pytest

from cuehunt.errors import ConfigurationError, GenerationError, IngestionError
from cuehunt.scenes import (
    Canvas,
    CueSpec,
    DistractorPool,
    Placement,
    archive_digest,
    choose_distractors,
    compose_adaptation,
    episode_digest,
    episode_stream,
    make_episode,
    normalize_point,
    read_archive,
    take,
    write_archive,
)
from cuehunt.stores import (
    BACKGROUND_RGB,
    CUE_GREEN,
    CUE_RED,
    ShapeConfig,
    Sprite,
    gen_shapes,
    load_omniglot,
    open_store,
)


class TestGlyphStore:

    def test_splits(self, glyph_store):
        assert glyph_store.alphabets("background") == ["Alphabet_1", "Alphabet_2", "Alphabet_3"]
        assert glyph_store.alphabets("evaluation") == ["Alphabet_4", "Alphabet_5"]
        assert len(glyph_store.identities("train")) == 9
        assert len(glyph_store.identities("test")) == 6

    def test_twenty_instances(self, glyph_store):
        assert all(glyph_store.instances(i) == 20 for i in glyph_store.identities("train"))

    def test_sprite_fits_box(self, glyph_store):
        identity = glyph_store.identities("test")[0]
        sprite = glyph_store.sprite(identity, 4, 40)
        assert sprite.size <= 40
        assert sprite.mask.any()
        assert sprite.pixels.shape == sprite.mask.shape + (3,)

    def test_strict_counts(self, omniglot_root):
        with pytest.raises(IngestionError, match="40 background"):
            load_omniglot(omniglot_root, strict=True)

    def test_missing_root(self, tmp_path):
        with pytest.raises(IngestionError, match="not found"):
            load_omniglot(str(tmp_path / "nowhere"))

    def test_empty_directory(self, tmp_path):
        with pytest.raises(IngestionError, match="images_background"):
            load_omniglot(str(tmp_path))

    def test_wrong_instance_count(self, omniglot_factory):
        import glob
        import os

        root = omniglot_factory(background=1, evaluation=1, characters=1)
        victim = sorted(glob.glob(os.path.join(root, "images_evaluation", "*", "*", "*.png")))[0]
        os.remove(victim)
        with pytest.raises(IngestionError, match="Expected 20 instances"):
            load_omniglot(root, strict=False)

    def test_glyphs_decoded_on_demand(self, omniglot_root):
        store = load_omniglot(omniglot_root, strict=False)
        assert store.decoded == []
        identity = store.identities("test")[1]
        sprite = store.sprite(identity, 3, 40)
        assert store.decoded == [identity]
        assert len(store.glyphs(identity)) == 20
        assert sprite.mask.any()

    def test_unreadable_glyph_reported_on_use(self, omniglot_factory):
        import glob
        import os

        root = omniglot_factory(background=1, evaluation=1, characters=1)
        victim = sorted(glob.glob(os.path.join(root, "images_evaluation", "*", "*", "*.png")))[0]
        with open(victim, "wb") as f:
            f.write(b"not an image")
        store = load_omniglot(root, strict=False)
        store.sprite(store.identities("train")[0], 0, 40)
        with pytest.raises(IngestionError, match="Unreadable image"):
            store.sprite(store.identities("test")[0], 5, 40)

    def test_open_store_without_root(self):
        with pytest.raises(IngestionError):
            open_store("omniglot", None)


class TestShapeStore:

    def test_full_counts(self, shape_store):
        assert len(shape_store.identities("train")) == 3072
        assert len(shape_store.identities("test")) == 512

    def test_truncated_counts(self, truncated_store):
        assert len(truncated_store.identities("train")) == 384
        assert len(truncated_store.identities("test")) == 48

    def test_disjoint_shapes_and_colors(self, shape_store):
        assert len(shape_store.train_shapes) == 8 and len(shape_store.test_shapes) == 4
        assert not set(shape_store.train_shapes) & set(shape_store.test_shapes)
        train = {tuple(c) for c in shape_store.train_palette}
        test = {tuple(c) for c in shape_store.test_palette}
        assert len(train) == 384 and len(test) == 128
        assert not train & test

    def test_colors_avoid_cues_and_background(self, shape_store):
        palette = np.concatenate([shape_store.train_palette, shape_store.test_palette]).astype(float)
        for rgb in (CUE_RED, CUE_GREEN, BACKGROUND_RGB):
            assert np.min(np.linalg.norm(palette - np.array(rgb), axis=1)) >= 60

    def test_truncated_is_prefix(self, shape_store, truncated_store):
        np.testing.assert_array_equal(truncated_store.train_palette, shape_store.train_palette[:48])
        np.testing.assert_array_equal(truncated_store.test_palette, shape_store.test_palette[:12])
        assert truncated_store.test_shapes == shape_store.test_shapes

    def test_same_seed_same_store(self, shape_store):
        again = gen_shapes(ShapeConfig(), seed=0)
        np.testing.assert_array_equal(again.test_palette, shape_store.test_palette)
        for a, b in zip(again.outlines, shape_store.outlines):
            np.testing.assert_array_equal(a, b)

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            ShapeConfig.for_variant("half")

    def test_sprite_color(self, shape_store):
        identity = shape_store.identities("test")[5]
        _, rgb = shape_store.describe(identity)
        sprite = shape_store.sprite(identity, 0, 40)
        assert sprite.size <= 40
        assert tuple(sprite.pixels[sprite.mask][0]) == rgb


def _square(identity, size):
    return Sprite(identity, 0, np.zeros((size, size, 3), dtype=np.uint8), np.ones((size, size), dtype=bool))


class TestComposition:

    def test_normalize_point(self):
        assert normalize_point(0, 149, 150, 150) == (0.0, 1.0)
        assert normalize_point(0, 0, 1, 1) == (0.5, 0.5)

    def test_placement_center(self):
        p = Placement("a", 0, top=10, left=20, height=5, width=4)
        assert p.center == (12.0, 21.5)
        assert p.bbox == (10, 20, 14, 23)
        assert p.contains(14, 23) and not p.contains(15, 23)

    def test_no_jitter_dot_on_center(self, shape_store):
        sprites = [shape_store.sprite(i, 0, 40) for i in shape_store.identities("train")[:4]]
        scene = compose_adaptation(sprites, CueSpec("red"), Canvas(), np.random.default_rng(0), cued_index=2)
        assert (scene.cue["row"], scene.cue["col"]) == scene.cued.center_pixel
        assert scene.cue["offset_row"] == scene.cue["offset_col"] == 0
        assert tuple(scene.image[scene.cue["row"], scene.cue["col"]]) == CUE_RED

    def test_green_marker_above_object(self, shape_store):
        sprites = [shape_store.sprite(i, 0, 40) for i in shape_store.identities("train")[10:14]]
        scene = compose_adaptation(sprites, CueSpec("green"), Canvas(), np.random.default_rng(1))
        assert scene.cue["row"] + scene.cue["radius"] < scene.cued.top
        assert scene.cue["offset_col"] == 0
        assert tuple(scene.image[scene.cue["row"], scene.cue["col"]]) == CUE_GREEN

    def test_jitter_bound(self, shape_store):
        cue = CueSpec("red", jitter=0.33)
        for seed in range(30):
            sprites = [shape_store.sprite(i, 0, 40) for i in shape_store.identities("train")[seed * 4:seed * 4 + 4]]
            scene = compose_adaptation(sprites, cue, Canvas(), np.random.default_rng(seed))
            assert abs(scene.cue["offset_row"]) <= 13
            assert abs(scene.cue["offset_col"]) <= 13

    def test_placements_disjoint(self, shape_store):
        for seed in range(20):
            sprites = [shape_store.sprite(i, 0, 40) for i in shape_store.identities("test")[seed * 4:seed * 4 + 4]]
            scene = compose_adaptation(sprites, CueSpec(), Canvas(), np.random.default_rng(seed))
            boxes = scene.placements
            assert all(not a.overlaps(b) for i, a in enumerate(boxes) for b in boxes[i + 1:])

    def test_needs_four_distinct_objects(self, shape_store):
        sprite = shape_store.sprite(shape_store.identities("train")[0], 0, 40)
        with pytest.raises(ConfigurationError):
            compose_adaptation([sprite] * 4, CueSpec(), Canvas(), np.random.default_rng(0))

    def test_canvas_too_small(self):
        sprites = [_square(f"s{i}", 8) for i in range(4)]
        with pytest.raises(GenerationError, match="retries"):
            compose_adaptation(sprites, CueSpec(), Canvas(size=8, object_size=8), np.random.default_rng(0))

    def test_bad_cue(self):
        with pytest.raises(ConfigurationError):
            CueSpec("blue")
        with pytest.raises(ConfigurationError):
            CueSpec("red", jitter=1.5)

    def test_distractors_never_cued(self):
        pool = DistractorPool(shown=("a", "b", "c", "d"), fresh=("e", "f", "g"))
        rng = np.random.default_rng(0)
        for _ in range(50):
            chosen = choose_distractors(pool, "a", rng)
            assert len(chosen) == 3 and len(set(chosen)) == 3
            assert "a" not in chosen

    def test_distractors_run_out(self):
        pool = DistractorPool(shown=("a", "b"), fresh=())
        with pytest.raises(GenerationError):
            choose_distractors(pool, "a", np.random.default_rng(0))


class TestEpisodes:

    @pytest.mark.parametrize("store_name", ["shape_store", "glyph_store"])
    def test_label_is_cued_center(self, request, store_name):
        store = request.getfixturevalue(store_name)
        canvas = Canvas(size=64)
        for index in range(10):
            ep = make_episode(store, "test", CueSpec(), canvas, seed=1, stream=0, index=index)
            cued = ep.cued_placement("target")
            assert ep.label == cued.normalized_center(64)
            assert cued.identity == ep.cued_placement("adapt").identity
            assert [p.identity for p in ep.placements("target")].count(cued.identity) == 1
            assert ep.adapt.shape == ep.target.shape == (64, 64, 3)

    @pytest.mark.parametrize("store_name", ["shape_store", "glyph_store"])
    @pytest.mark.parametrize("kind", ["red-dot", "green-marker"])
    @pytest.mark.parametrize("jitter", [0.0, 0.33])
    def test_single_cue_only_in_adaptation(self, request, store_name, kind, jitter):
        store = request.getfixturevalue(store_name)
        cue = CueSpec(kind, jitter=jitter)
        colour, other = (CUE_RED, CUE_GREEN) if kind == "red-dot" else (CUE_GREEN, CUE_RED)
        for ep in take(episode_stream(store, "test", cue, seed=4, canvas=Canvas(size=64)), 8):
            for rgb in (CUE_RED, CUE_GREEN):
                assert not np.all(ep.target == rgb, axis=-1).any()
            assert not np.all(ep.adapt == other, axis=-1).any()
            rows, cols = np.nonzero(np.all(ep.adapt == colour, axis=-1))
            meta = ep.meta["adapt"]["cue"]
            assert len(rows) > 0
            assert np.abs(rows - meta["row"]).max() <= meta["radius"]
            assert np.abs(cols - meta["col"]).max() <= meta["radius"]

    def test_fresh_glyph_instance(self, glyph_store):
        for index in range(10):
            ep = make_episode(glyph_store, "train", CueSpec(), Canvas(size=64), seed=0, stream=0, index=index)
            assert ep.cued_placement("target").instance != ep.cued_placement("adapt").instance

    def test_split_hygiene(self, glyph_store, shape_store):
        for ep in take(episode_stream(glyph_store, "train", CueSpec(), seed=2, canvas=Canvas(size=64)), 10):
            for which in ("adapt", "target"):
                for p in ep.placements(which):
                    assert glyph_store.splits[p.identity.split("/")[0]] == "background"
        for ep in take(episode_stream(shape_store, "test", CueSpec(), seed=2, canvas=Canvas(size=64)), 10):
            for which in ("adapt", "target"):
                assert all(p.identity.startswith("test/") for p in ep.placements(which))

    def test_determinism(self, shape_store):
        canvas = Canvas(size=64)
        a = make_episode(shape_store, "train", CueSpec(), canvas, seed=5, stream=0, index=3)
        b = make_episode(shape_store, "train", CueSpec(), canvas, seed=5, stream=0, index=3)
        c = make_episode(shape_store, "train", CueSpec(), canvas, seed=5, stream=1, index=3)
        assert episode_digest([a]) == episode_digest([b])
        assert a.meta == b.meta
        assert episode_digest([a]) != episode_digest([c])

    def test_stream_start(self, shape_store):
        canvas = Canvas(size=64)
        later = take(episode_stream(shape_store, "train", CueSpec(), seed=0, canvas=canvas, start=5), 2)
        direct = make_episode(shape_store, "train", CueSpec(), canvas, seed=0, stream=0, index=5)
        assert later[0].episode_id == direct.episode_id
        assert episode_digest(later[:1]) == episode_digest([direct])

    def test_chw_scaling(self, shape_store):
        ep = make_episode(shape_store, "train", CueSpec(), Canvas(size=32), seed=0, stream=0, index=0)
        x = ep.adapt_chw()
        assert x.shape == (3, 32, 32)
        assert 0.0 <= x.min() and x.max() <= 1.0

    def test_negative_index(self, shape_store):
        with pytest.raises(ConfigurationError):
            make_episode(shape_store, "train", CueSpec(), Canvas(size=64), seed=0, stream=0, index=-1)


class TestArchive:

    def test_round_trip(self, shape_store, tmp_path):
        episodes = take(episode_stream(shape_store, "test", CueSpec("green"), seed=0, canvas=Canvas(size=64)), 3)
        write_archive(episodes, tmp_path / "a")
        loaded = read_archive(tmp_path / "a")
        assert [e.episode_id for e in loaded] == [e.episode_id for e in episodes]
        for got, want in zip(loaded, episodes):
            np.testing.assert_array_equal(got.adapt, want.adapt)
            np.testing.assert_array_equal(got.target, want.target)
            assert got.label == want.label
            assert got.meta["adapt"]["cue"] == want.meta["adapt"]["cue"]

    def test_stable_digest(self, shape_store, tmp_path):
        def archive(name):
            eps = take(episode_stream(shape_store, "test", CueSpec(), seed=4, canvas=Canvas(size=64)), 4)
            write_archive(eps, tmp_path / name)
            return archive_digest(tmp_path / name)

        assert archive("first") == archive("second")

    def test_missing_archive(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_archive(tmp_path / "missing")
