import math

import numpy as np
import pytest

from scrapline import simulator as sim
from scrapline.segmentation import segment_grabs
from scrapline.simulator import (
    AnnotatorProfile, Campaign, CampaignConfig, annotate_sim, default_profiles,
    gen_campaign, gen_iou_trace, load_campaign, noise_floor, railcar_track,
    write_campaign,
)


def small_config(**overrides):
    base = dict(n_railcars=12, layers_min=4, layers_max=7, seed=42,
                split_ratios=(0.5, 0.25, 0.25))
    base.update(overrides)
    return CampaignConfig(**base)


class TestGenCampaign:
    def test_same_seed_identical_files(self, tmp_path):
        cfg = small_config()
        d1, d2 = tmp_path / "a", tmp_path / "b"
        write_campaign(gen_campaign(cfg), d1)
        write_campaign(gen_campaign(cfg), d2)
        for rel in ("manifest.json", "ground_truth.jsonl", "layers.jsonl",
                    "labels.jsonl", "raters.jsonl"):
            assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes(), rel
        for track in sorted((d1 / "tracks").iterdir()):
            assert track.read_bytes() == (d2 / "tracks" / track.name).read_bytes()

    def test_zero_feature_noise_is_exact_linear_image(self):
        cfg = small_config(sigma_feat=0.0, p_hot=0.0)
        campaign = gen_campaign(cfg)
        # with no noise, per-layer features of equal-contamination layers of
        # the same grade must coincide exactly
        car = next(c for c in campaign.railcars if len(c.layers) >= 2)
        l0 = car.layers[0]
        twin_signal = np.zeros(2 + 4)
        twin_signal[0] = l0.contamination
        twin_signal[2 + car.grade] = cfg.grade_feature_scale
        mix_rng = np.random.default_rng([cfg.seed, sim._STREAM_FEATURES])
        mixing = mix_rng.normal(size=(2 + 4, cfg.feature_dim))
        assert np.allclose(l0.features, twin_signal @ mixing)

    def test_contamination_mean_matches_prior(self):
        cfg = CampaignConfig(n_railcars=300, seed=7, split_ratios=(0.8, 0.1, 0.1))
        campaign = gen_campaign(cfg)
        values = [c.contamination for c in campaign.railcars]
        prior_mean = 2.5
        prior_sigma = 5.0 / math.sqrt(12.0)
        assert abs(np.mean(values) - prior_mean) < 3 * prior_sigma / math.sqrt(300)

    def test_truth_is_layer_mean(self):
        campaign = gen_campaign(small_config(p_hot=0.5))
        for car in campaign.railcars:
            assert car.contamination == pytest.approx(
                np.mean([l.contamination for l in car.layers]), abs=1e-12)

    def test_hot_layer_carries_factor(self):
        campaign = gen_campaign(small_config(p_hot=1.0, n_railcars=6))
        for car in campaign.railcars:
            assert car.hot_layer is not None
            hot_c = car.layers[car.hot_layer].contamination
            other = [l.contamination for l in car.layers if l.index != car.hot_layer]
            if other[0] > 0:
                assert hot_c / other[0] == pytest.approx(5.0)

    def test_layer_count_within_distribution(self):
        campaign = gen_campaign(small_config(n_railcars=30))
        for car in campaign.railcars:
            assert 4 <= len(car.layers) <= 7

    def test_grade_conditional_features_differ(self):
        cfg = small_config(n_railcars=60, sigma_feat=0.1)
        campaign = gen_campaign(cfg)
        by_grade = {}
        for car in campaign.railcars:
            for layer in car.layers:
                by_grade.setdefault(car.grade, []).append(layer.features)
        grades = [g for g, rows in by_grade.items() if len(rows) >= 10]
        assert len(grades) >= 2
        m0 = np.mean(by_grade[grades[0]], axis=0)
        m1 = np.mean(by_grade[grades[1]], axis=0)
        assert np.linalg.norm(m0 - m1) > 0.5

    def test_fault_injection_rate(self):
        cfg = small_config(n_railcars=100, fault_rate=0.2)
        campaign = gen_campaign(cfg)
        layers = [l for c in campaign.railcars for l in c.layers]
        bad = sum(1 for l in layers if not l.quality_ok)
        assert 0.12 < bad / len(layers) < 0.28
        assert all(l.fault_codes for l in layers if not l.quality_ok)


class TestIouTraceRoundTrip:
    def test_zero_grabs_flat_noise(self):
        trace, peaks = gen_iou_trace(0, rng=np.random.default_rng(1))
        assert peaks == []
        assert segment_grabs(trace) == []

    def test_round_trip_recovers_configured_count(self):
        for n in range(21):
            trace, _ = gen_iou_trace(n, rng=np.random.default_rng(100 + n))
            assert len(segment_grabs(trace)) == n, f"n={n}"

    def test_peaks_recovered_within_one_frame(self):
        trace, peaks = gen_iou_trace(5, rng=np.random.default_rng(3))
        intervals = segment_grabs(trace)
        assert len(intervals) == 5
        for interval, apex in zip(intervals, peaks):
            assert abs(interval.peak - apex) <= 1

    def test_track_embedding_reproduces_trace(self):
        campaign = gen_campaign(small_config(n_railcars=3))
        car = campaign.railcars[0]
        track = railcar_track(car)
        recovered = track.iou_trace()
        assert np.allclose(recovered, np.minimum(car.trace, 0.99), atol=1e-9)
        assert len(segment_grabs(recovered)) == len(car.layers)


class TestAnnotateSim:
    def test_identity_rater(self):
        p = AnnotatorProfile("r", bias=0.0, scale=1.0, sigma=0.0)
        assert annotate_sim(p, 2.3, np.random.default_rng(0)) == 2.3

    def test_biased_rater(self):
        p = AnnotatorProfile("r", bias=2.0, scale=1.0, sigma=0.0)
        assert annotate_sim(p, 1.0, np.random.default_rng(0)) == 3.0

    def test_clamped_to_range(self):
        p = AnnotatorProfile("r", bias=-5.0, scale=1.0, sigma=0.0)
        assert annotate_sim(p, 1.0, np.random.default_rng(0)) == 0.0

    def test_noise_width_recovered(self):
        p = AnnotatorProfile("r", sigma=0.5)
        rng = np.random.default_rng(5)
        draws = np.array([annotate_sim(p, 50.0, rng) for _ in range(10_000)])
        assert abs(draws.std() - 0.5) < 0.05 * 0.5


class TestNoiseFloor:
    def test_exact_raters_floor_zero(self):
        profiles = [AnnotatorProfile(f"r{i}", sigma=0.0) for i in range(3)]
        assert noise_floor(profiles) == 0.0

    def test_gaussian_identity(self):
        profiles = default_profiles(3, sigma=0.3)
        expected = (0.3 / math.sqrt(3)) * math.sqrt(2 / math.pi)
        assert noise_floor(profiles) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.1382, abs=2e-4)

    def test_bias_dominates(self):
        # true floor is E|1 + eps| >= 1; allow Monte-Carlo standard error
        profiles = [AnnotatorProfile(f"r{i}", bias=1.0, sigma=0.1) for i in range(3)]
        floor = noise_floor(profiles, mode="mc", mc_draws=50_000)
        assert floor >= 1.0 - 1e-3

    def test_mc_agrees_with_analytic_for_unbiased(self):
        profiles = default_profiles(3, sigma=0.3)
        analytic = noise_floor(profiles, mode="analytic")
        mc = noise_floor(profiles, mode="mc", mc_draws=200_000)
        assert mc == pytest.approx(analytic, rel=0.05)


class TestCampaignExportImport:
    def test_round_trip(self, tmp_path):
        campaign = gen_campaign(small_config())
        write_campaign(campaign, tmp_path / "camp")
        loaded = load_campaign(tmp_path / "camp")
        assert len(loaded.railcars) == len(campaign.railcars)
        for a, b in zip(campaign.railcars, loaded.railcars):
            assert a.railcar_id == b.railcar_id
            assert a.contamination == pytest.approx(b.contamination)
            assert np.allclose(np.stack([l.features for l in a.layers]),
                               np.stack([l.features for l in b.layers]))
        assert loaded.labels == campaign.labels
        assert loaded.noise_floor == campaign.noise_floor

    def test_dataset_and_split(self):
        campaign = gen_campaign(small_config())
        parts = campaign.split_dataset()
        assert sum(len(v) for v in parts.values()) == 12
        ids = [bag.railcar_id for v in parts.values() for bag, _ in v]
        assert len(set(ids)) == 12
        for bag, label in parts["train"]:
            assert 0 <= label.contamination <= 100
            assert label.grade in range(4)

    def test_consensus_matches_manual_mean(self):
        campaign = gen_campaign(small_config())
        car = campaign.railcars[0].railcar_id
        mean, _ = campaign.consensus(car)
        manual = np.mean([v[0] for v in campaign.labels[car].values()])
        assert mean == pytest.approx(manual)
