import json
from dataclasses import replace

import pytest

from cuehunt.baseline import TemplateMatcher
from cuehunt.errors import ConfigurationError
from cuehunt.experiments import (
    EXPERIMENTS,
    ExperimentSpec,
    classify_grasp,
    evaluation_episodes,
    get_experiment,
    hotspot_rate,
    pick_place_mock,
    run_experiment,
)
from cuehunt.scenes import Canvas, CueSpec, Placement
from cuehunt.train import ModelPredictor, TrainConfig, train


def perfect(episode):
    return episode.label


class TestRegistry:

    def test_names(self):
        assert set(EXPERIMENTS) == {
            "omniglot-base", "omniglot-jitter", "omniglot-green", "shapes-full", "shapes-truncated",
        }

    def test_unknown(self):
        with pytest.raises(ConfigurationError, match="omniglot-base"):
            get_experiment("omniglot-blue")

    def test_thresholds(self):
        assert get_experiment("omniglot-base").thresholds() == {"max_mse": 0.02, "min_success_at_15": 0.85}
        assert get_experiment("omniglot-jitter").thresholds() == {"max_mse": 0.04}
        assert get_experiment("shapes-truncated").thresholds() == {}

    def test_train_config(self):
        config = get_experiment("omniglot-jitter").train_config(seed=4, steps=10)
        assert isinstance(config, TrainConfig)
        assert config.cue == CueSpec("red-dot", jitter=0.33)
        assert (config.protocol, config.seed, config.steps) == ("omniglot", 4, 10)
        truncated = get_experiment("shapes-truncated").train_config()
        assert truncated.shapes_variant == "truncated"

    def test_dict_round_trip(self):
        spec = get_experiment("omniglot-green")
        assert ExperimentSpec.from_dict(spec.to_dict()) == spec


class TestClassifyGrasp:

    @pytest.fixture
    def placements(self):
        return [Placement("a", 0, 10, 10, 11, 11), Placement("b", 0, 60, 60, 11, 11)]

    def test_centers(self, placements):
        assert placements[0].normalized_center(101) == pytest.approx((0.15, 0.15))
        assert placements[1].normalized_center(101) == pytest.approx((0.65, 0.65))

    @pytest.mark.parametrize("point,outcome,nearest", [
        ((0.15, 0.15), "success", 0),
        ((0.65, 0.66), "wrong-object", 1),
        ((0.35, 0.35), "collision", 0),
    ])
    def test_outcomes(self, placements, point, outcome, nearest):
        got_nearest, distance, error, got = classify_grasp(point, placements, 0, 101, 0.10)
        assert got == outcome
        assert got_nearest == nearest
        assert error == pytest.approx(((point[0] - 0.15) ** 2 + (point[1] - 0.15) ** 2) ** 0.5)

    def test_tolerance_is_inclusive(self, placements):
        assert classify_grasp((0.25, 0.15), placements, 0, 101, 0.10)[3] == "success"


class TestPickPlace:

    def test_perfect_predictor(self, shape_store):
        result = pick_place_mock(perfect, shape_store, n=20)
        assert result.successes == 20
        assert result.counts() == {"success": 20, "wrong-object": 0, "collision": 0}

    def test_corner_collides(self, shape_store):
        result = pick_place_mock(lambda ep: (0.0, 0.0), shape_store, n=20)
        assert result.successes == 0
        assert result.counts()["collision"] == 20

    def test_glyph_store_rejected(self, glyph_store):
        with pytest.raises(ConfigurationError, match="shapes"):
            pick_place_mock(perfect, glyph_store, n=2)

    def test_write(self, shape_store, tmp_path):
        result = pick_place_mock(perfect, shape_store, n=3)
        result.write(tmp_path)
        summary = json.loads((tmp_path / "pickplace_summary.jsonl").read_text())
        assert summary["trials"] == 3 and summary["successes"] == 3
        assert len((tmp_path / "pickplace_trials.jsonl").read_text().splitlines()) == 3

    def test_trials_use_their_own_stream(self, shape_store):
        canvas = Canvas(size=64)
        test_ids = {e.episode_id for e in evaluation_episodes(shape_store, CueSpec(), canvas, 0, 5)}
        trial_ids = {t.episode_id for t in pick_place_mock(perfect, shape_store, n=5).trials}
        assert not test_ids & trial_ids


class TestRunExperiment:

    def test_perfect_predictor_passes(self, shape_store, tmp_path):
        result = run_experiment(get_experiment("shapes-full"), shape_store, predictor=perfect,
                                episodes=12, out_dir=tmp_path)
        assert result.passed is True
        assert result.report.episodes == 12
        summary = json.loads((tmp_path / "shapes-full_result.jsonl").read_text())
        assert summary["passed"] is True and summary["experiment"] == "shapes-full"
        assert (tmp_path / "shapes-full_episodes.jsonl").exists()

    def test_center_stub_fails(self, shape_store):
        result = run_experiment(get_experiment("shapes-full"), shape_store,
                                predictor=lambda ep: (0.5, 0.5), episodes=32)
        assert result.passed is False
        assert result.checks["min_success_at_15"] is False

    def test_no_thresholds(self, truncated_store):
        result = run_experiment(get_experiment("shapes-truncated"), truncated_store, predictor=perfect, episodes=4)
        assert result.passed is None

    def test_wrong_store(self, glyph_store):
        with pytest.raises(ConfigurationError, match="shapes"):
            run_experiment(get_experiment("shapes-full"), glyph_store, predictor=perfect, episodes=2)

    def test_needs_a_model(self, shape_store):
        with pytest.raises(ConfigurationError, match="checkpoint"):
            run_experiment(get_experiment("shapes-full"), shape_store, episodes=2)

    def test_deterministic(self, shape_store):
        spec = get_experiment("shapes-full")
        stub = lambda ep: (0.4, 0.6)
        a = run_experiment(spec, shape_store, predictor=stub, episodes=8, seed=2)
        b = run_experiment(spec, shape_store, predictor=stub, episodes=8, seed=2)
        assert a.report.records == b.report.records

    def test_hotspot_rate(self, shape_store):
        config = TrainConfig(protocol="shapes", canvas=24, architecture="tiny", steps=0, eval_episodes=1)
        ckpt = train(config, shape_store)
        spec = replace(get_experiment("shapes-full"), eval_episodes=4)
        result = run_experiment(spec, shape_store, checkpoint=ckpt, hotspot_episodes=4)
        assert 0.0 <= result.hotspot <= 1.0
        eps = evaluation_episodes(shape_store, CueSpec(), Canvas(size=24), 0, 3)
        assert 0.0 <= hotspot_rate(ModelPredictor.from_checkpoint(ckpt), eps) <= 1.0


class TestTemplateMatcher:

    def test_finds_shapes(self, shape_store):
        result = run_experiment(get_experiment("shapes-full"), shape_store, predictor=TemplateMatcher(),
                                episodes=16)
        assert result.report.success_at_15 >= 0.5

    def test_no_cue_predicts_center(self, shape_store):
        episode = evaluation_episodes(shape_store, CueSpec(), Canvas(size=64), 0, 1)[0]
        blank = replace(episode, adapt=Canvas(size=64).blank())
        assert TemplateMatcher()(blank) == (0.5, 0.5)
