"""Tests for preprocess module."""

import numpy as np
import pytest

from psigan.preprocess import (
    DECILES,
    IntensityPipeline,
    IntensityPipelineConfig,
    denormalize_signed_unit,
    fit_pipeline,
    image_landmarks,
    landmark_standardize,
    normalize_signed_unit,
    percentile_clip,
)


@pytest.fixture
def reference():
    rng = np.random.default_rng(0)
    return rng.gamma(4.0, 200.0, size=(32, 32))


class TestPipelineConfig:
    def test_defaults(self):
        config = IntensityPipelineConfig()
        assert config.clip_percentile == 95.0
        assert config.landmark_percentiles == DECILES
        assert (config.target_lo, config.target_hi) == (-1.0, 1.0)

    def test_invalid_percentile(self):
        with pytest.raises(ValueError, match="clip_percentile"):
            IntensityPipelineConfig(clip_percentile=0)

    def test_invalid_range(self):
        with pytest.raises(ValueError, match="lo must be < hi"):
            IntensityPipelineConfig(target_lo=1.0, target_hi=1.0)


class TestPercentileClip:
    def test_below_bound_unchanged(self):
        image = np.full((4, 4), 5.0)
        np.testing.assert_array_equal(percentile_clip(image, 95, reference_hi=10.0), image)

    def test_clips_at_bound(self):
        image = np.arange(101, dtype=float)
        assert percentile_clip(image, 95, reference_hi=95.0).max() == 95.0

    def test_monotone(self):
        rng = np.random.default_rng(1)
        image = rng.uniform(0, 100, 200)
        out = percentile_clip(image, 95, reference_hi=80.0)
        order = np.argsort(image)
        assert np.all(np.diff(out[order]) >= 0)

    def test_rejects_non_finite(self):
        image = np.ones((3, 3))
        image[1, 2] = np.nan
        with pytest.raises(ValueError, match=r"Non-finite pixel at \(1, 2\)"):
            percentile_clip(image, 95, reference_hi=1.0)

    def test_rejects_bad_reference(self):
        with pytest.raises(ValueError, match="reference_hi"):
            percentile_clip(np.ones(3), 95, reference_hi=0.0)

    def test_lower_bound(self):
        out = percentile_clip(np.array([-5.0, -0.5, 2.0]), reference_hi=1.0, lo=-1.0)
        np.testing.assert_array_equal(out, [-1.0, -0.5, 1.0])
        with pytest.raises(ValueError, match="Must be > -1.0"):
            percentile_clip(np.ones(3), reference_hi=-2.0, lo=-1.0)


class TestLandmarkStandardize:
    def test_fixed_point(self, reference):
        out, degenerate = landmark_standardize(reference, image_landmarks(reference))
        assert not degenerate
        np.testing.assert_allclose(out, reference, atol=1e-6)

    def test_affine_copy_matches_reference_deciles(self, reference):
        shifted = 3.0 * reference + 500.0
        out, _ = landmark_standardize(shifted, image_landmarks(reference))
        np.testing.assert_allclose(
            np.percentile(out, DECILES), np.percentile(reference, DECILES), atol=1e-6
        )

    def test_constant_image_flagged(self, reference):
        image = np.full((8, 8), 3.0)
        out, degenerate = landmark_standardize(image, image_landmarks(reference))
        assert degenerate
        np.testing.assert_array_equal(out, image)

    def test_reference_must_increase(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            landmark_standardize(np.arange(16.0), [0.0] * (len(DECILES) + 2))


class TestNormalizeSignedUnit:
    def test_endpoints(self):
        out = normalize_signed_unit(np.array([2.0, 10.0]), (2.0, 10.0))
        np.testing.assert_array_equal(out, [-1.0, 1.0])

    def test_midpoint(self):
        assert normalize_signed_unit(np.array([6.0]), (2.0, 10.0))[0] == 0.0

    def test_round_trip(self):
        image = np.random.default_rng(2).uniform(0, 1136, (16, 16))
        back = denormalize_signed_unit(normalize_signed_unit(image, (0, 1136)), (0, 1136))
        assert np.abs(back - image).max() < 1e-6

    def test_out_of_range_names_pixel_and_bound(self):
        image = np.zeros((3, 3))
        image[2, 1] = 11.0
        with pytest.raises(ValueError, match=r"Pixel \(2, 1\) value 11.0 is above upper bound 10.0"):
            normalize_signed_unit(image, (0.0, 10.0))

    def test_bad_range(self):
        with pytest.raises(ValueError, match="hi must be > lo"):
            normalize_signed_unit(np.zeros(2), (1.0, 1.0))


class TestIntensityPipeline:
    def test_output_in_unit_range(self, reference):
        pipeline = fit_pipeline(reference)
        out = pipeline.apply(reference * 1.7 + 20)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_clip_bound_from_reference(self, reference):
        pipeline = fit_pipeline(reference)
        assert pipeline.clip_hi == pytest.approx(np.percentile(reference, 95))

    def test_second_identity_pass_is_noop(self, reference):
        once = fit_pipeline(reference).apply(reference)
        twice = IntensityPipeline.identity().apply(once)
        assert np.abs(twice - once).max() <= 1e-6

    def test_invert(self, reference):
        pipeline = fit_pipeline(reference)
        out = pipeline.apply(reference)
        restored = pipeline.invert(out)
        np.testing.assert_allclose(restored, np.clip(reference, 0, pipeline.clip_hi), atol=1e-6)

    def test_apply_clips_through_percentile_clip(self):
        image = np.array([[-3.0, -0.5], [0.5, np.nan]])
        with pytest.raises(ValueError, match="Non-finite pixel at \\(1, 1\\)"):
            IntensityPipeline.identity().apply(image)
        out = IntensityPipeline.identity().apply(np.array([-3.0, -0.5, 0.5, 3.0]))
        np.testing.assert_allclose(out, [-1.0, -0.5, 0.5, 1.0])
