"""Tests for translation module."""

import json

import numpy as np
import pytest
import torch

from psigan.data import load_split
from psigan.models import ModelBundle
from psigan.translation import Direction, translate_images, translate_split


@pytest.fixture(scope="module")
def bundle():
    torch.manual_seed(0)
    return ModelBundle("tiny", num_labels=3)


class TestDirection:
    @pytest.mark.parametrize("text", ["C2M", "c2m", "C->M", "C→M"])
    def test_parse_forward(self, text):
        assert Direction.parse(text) is Direction.C2M

    def test_parse_invalid(self):
        with pytest.raises(ValueError, match="Invalid direction: X2Y"):
            Direction.parse("X2Y")


class TestTranslate:
    def test_shape_and_range(self, bundle):
        images = torch.rand(3, 1, 32, 32) * 2 - 1
        out = translate_images(bundle, images, Direction.M2C, batch_size=2)
        assert out.shape == images.shape
        assert out.abs().max() < 1

    def test_split_outputs(self, tmp_path, bundle, smoke_manifest):
        inputs = load_split(smoke_manifest, "source_train").subset(3)
        real = load_split(smoke_manifest, "target_test")
        report = translate_split(bundle, inputs, real, Direction.C2M, tmp_path, bins=16)
        assert report.count == 3
        with np.load(tmp_path / "pseudo.npz") as data:
            assert data["images"].shape == (3, 32, 32)
            assert list(data["scene_ids"]) == inputs.scene_ids
        kl = json.loads((tmp_path / "kl.json").read_text())
        assert kl["direction"] == "C2M"
        assert set(kl["kl"]) == {"1", "2"}

    def test_needs_masks(self, tmp_path, bundle, smoke_manifest):
        unlabeled = load_split(smoke_manifest, "target_train")
        real = load_split(smoke_manifest, "source_train")
        with pytest.raises(ValueError, match="needs masks"):
            translate_split(bundle, unlabeled, real, Direction.M2C, tmp_path)
