"""Finite-difference checks of the gradients every loss sends into its networks."""

import pytest
import torch

from psigan.gradcheck import GradientCheckResult, check_parameter_gradients
from psigan.losses import (
    LossForm,
    Role,
    adversarial_loss,
    cycle_loss,
    make_joint_pair,
    segmentation_loss,
    structure_discriminator_loss,
    structure_generator_loss,
)
from psigan.models import Branch, ModelBundle

TOLERANCE = 1e-4


@pytest.fixture(scope="module")
def bundle():
    torch.manual_seed(0)
    b = ModelBundle("tiny", num_labels=3).double()
    b.eval()
    return b


@pytest.fixture(scope="module")
def batch():
    g = torch.Generator().manual_seed(1)
    x_c = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
    x_m = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
    y_c = torch.randint(0, 3, (1, 16, 16), generator=g)
    return x_c, x_m, y_c


def assert_close(results: list[GradientCheckResult]) -> None:
    assert results
    worst = max(results, key=lambda r: r.relative_error)
    assert worst.relative_error < TOLERANCE, worst


class TestRelativeError:
    def test_floor_for_tiny_gradients(self):
        assert GradientCheckResult("w", 0, 1e-9, 0.0).relative_error == pytest.approx(1e-6)

    def test_scale(self):
        assert GradientCheckResult("w", 0, 2.0, 1.0).relative_error == pytest.approx(0.5)

    def test_no_trainable_parameters(self):
        module = torch.nn.Linear(2, 2)
        module.requires_grad_(False)
        with pytest.raises(ValueError, match="no trainable"):
            check_parameter_gradients(module, lambda: torch.zeros(()))


class TestNetworkGradients:
    def test_generator_adversarial(self, bundle, batch):
        x_c, _, _ = batch

        def loss():
            return adversarial_loss(None, bundle.d_m(bundle.g_cm(x_c)), Role.GENERATOR)

        assert_close(check_parameter_gradients(bundle.g_cm, loss))

    def test_generator_cycle(self, bundle, batch):
        x_c, _, _ = batch
        assert_close(
            check_parameter_gradients(bundle.g_mc, lambda: cycle_loss(x_c, bundle.g_mc(bundle.g_cm(x_c))), seed=1)
        )

    @pytest.mark.parametrize("form", list(LossForm))
    def test_discriminator_forms(self, bundle, batch, form):
        x_c, x_m, _ = batch

        def loss():
            return adversarial_loss(bundle.d_m(x_m), bundle.d_m(x_c), Role.DISCRIMINATOR, form)

        assert_close(check_parameter_gradients(bundle.d_m, loss))

    def test_structure_discriminator(self, bundle, batch):
        x_c, x_m, _ = batch
        with torch.no_grad():
            real_pair = make_joint_pair(x_m, bundle.segmentor(x_m, Branch.S_M))
            fake_pair = make_joint_pair(x_c, bundle.segmentor(x_c, Branch.S_CM))

        def loss():
            return structure_discriminator_loss(bundle.d_struct[0](real_pair), bundle.d_struct[0](fake_pair))

        assert_close(check_parameter_gradients(bundle.d_struct, loss))


class TestSegmentorGradients:
    """Train-mode checks: batch norm normalizes with the statistics of each batch."""

    MIN_GRADIENT = 1e-4

    @pytest.fixture
    def seg_bundle(self):
        torch.manual_seed(0)
        b = ModelBundle("tiny", num_labels=3).double()
        b.eval()
        b.segmentor.train()
        return b

    @pytest.fixture
    def seg_batch(self):
        g = torch.Generator().manual_seed(1)
        x_c = torch.rand(2, 1, 32, 32, generator=g, dtype=torch.float64) * 2 - 1
        y_c = torch.randint(0, 3, (2, 32, 32), generator=g)
        return x_c, y_c

    def assert_checked(self, results):
        assert max(abs(r.analytic) for r in results) > self.MIN_GRADIENT, results
        assert_close(results)

    def seg_loss(self, bundle, x_c, y_c):
        def loss():
            seg_m, seg_bar = segmentation_loss(
                bundle.segmentor(x_c, Branch.S_M), bundle.segmentor(x_c, Branch.S_CM), y_c
            )
            return seg_m + seg_bar

        return loss

    def test_structure_generator_reaches_segmentor(self, seg_bundle, seg_batch):
        x_c, _ = seg_batch

        def loss():
            pair = make_joint_pair(x_c, seg_bundle.segmentor(x_c, Branch.S_CM))
            return structure_generator_loss(seg_bundle.d_struct[0](pair))

        self.assert_checked(check_parameter_gradients(seg_bundle.segmentor.enc_cm, loss, seed=2))

    def test_segmentation_decoder(self, seg_bundle, seg_batch):
        loss = self.seg_loss(seg_bundle, *seg_batch)
        self.assert_checked(check_parameter_gradients(seg_bundle.segmentor.decoder, loss, seed=3))

    def test_segmentation_head_every_parameter(self, seg_bundle, seg_batch):
        head = seg_bundle.segmentor.decoder.head
        count = sum(p.numel() for p in head.parameters())
        loss = self.seg_loss(seg_bundle, *seg_batch)
        results = check_parameter_gradients(head, loss, num_params=count)
        assert len(results) == count
        self.assert_checked(results)

    @pytest.mark.parametrize("branch", ["enc_m", "enc_cm"])
    def test_segmentation_encoders(self, seg_bundle, seg_batch, branch):
        loss = self.seg_loss(seg_bundle, *seg_batch)
        self.assert_checked(check_parameter_gradients(getattr(seg_bundle.segmentor, branch), loss, seed=4))
