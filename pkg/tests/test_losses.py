"""Tests for losses module."""

import math

import pytest
import torch

from psigan.losses import (
    LossForm,
    LossReport,
    LossWeights,
    NonFiniteLogitsError,
    PairVariant,
    ProbabilityMap,
    Role,
    adversarial_loss,
    aggregate_soi_probability,
    cycle_loss,
    make_joint_pair,
    segmentation_loss,
    structure_discriminator_loss,
    structure_generator_loss,
    total_discriminator_objective,
    total_generator_objective,
)
from psigan.models import PatchDiscriminator, PatchDiscriminatorSpec
from psigan.settings import get_mask_for_setting


@pytest.fixture
def prob_map():
    torch.manual_seed(0)
    return torch.softmax(torch.randn(2, 4, 8, 8), dim=1)


class TestAdversarialLoss:
    def test_least_squares_discriminator_zero_at_optimum(self):
        loss = adversarial_loss(torch.ones(1, 1, 4, 4), torch.zeros(1, 1, 4, 4), Role.DISCRIMINATOR)
        assert loss.item() == 0.0

    def test_least_squares_generator(self):
        loss = adversarial_loss(None, torch.zeros(1, 1, 4, 4), Role.GENERATOR)
        assert loss.item() == pytest.approx(1.0)

    def test_log_form_at_half(self):
        """sigmoid(0) = 0.5 gives 2 log 2 for the discriminator."""
        zeros = torch.zeros(1, 1, 4, 4)
        loss = adversarial_loss(zeros, zeros, Role.DISCRIMINATOR, LossForm.LOG)
        assert loss.item() == pytest.approx(2 * math.log(2), abs=1e-4)
        assert loss.item() == pytest.approx(1.3863, abs=1e-4)

    def test_log_generator_forms(self):
        zeros = torch.zeros(1, 1, 2, 2)
        assert adversarial_loss(None, zeros, Role.GENERATOR, LossForm.LOG).item() == pytest.approx(math.log(2))
        saturating = adversarial_loss(None, zeros, Role.GENERATOR, LossForm.LOG_SATURATING)
        assert saturating.item() == pytest.approx(-math.log(2))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            adversarial_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 3, 3), Role.DISCRIMINATOR)

    def test_missing_real(self):
        with pytest.raises(ValueError, match="needs real logits"):
            adversarial_loss(None, torch.zeros(1, 1, 2, 2), Role.DISCRIMINATOR)

    def test_non_finite(self):
        logits = torch.zeros(1, 1, 2, 2)
        logits[0, 0, 1, 1] = float("nan")
        with pytest.raises(NonFiniteLogitsError):
            adversarial_loss(None, logits, Role.GENERATOR)


class TestCycleLoss:
    def test_identical_is_zero(self):
        x = torch.randn(2, 1, 8, 8)
        assert cycle_loss(x, x.clone()).item() == 0.0

    def test_constant_offset(self):
        x = torch.zeros(1, 1, 4, 4)
        assert cycle_loss(x, x + 0.25).item() == pytest.approx(0.25)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="Shape mismatch"):
            cycle_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 8, 8))


class TestAggregate:
    def test_psi_is_one_minus_background(self, prob_map):
        psi = aggregate_soi_probability(prob_map)
        assert psi.shape == (2, 1, 8, 8)
        torch.testing.assert_close(psi[:, 0], 1 - prob_map[:, 0], atol=1e-6, rtol=0)

    def test_bounded(self, prob_map):
        psi = aggregate_soi_probability(prob_map)
        assert psi.min() >= 0 and psi.max() <= 1

    def test_rejects_unnormalized(self, prob_map):
        with pytest.raises(ValueError, match="deviate from 1"):
            aggregate_soi_probability(prob_map * 1.1)

    def test_probability_map_wrapper(self, prob_map):
        pm = ProbabilityMap(prob_map)
        assert pm.num_labels == 4
        assert pm.argmax().shape == (2, 8, 8)
        torch.testing.assert_close(pm.aggregated, aggregate_soi_probability(prob_map))


class TestSegmentationLoss:
    def test_uniform_prediction_is_log_k(self):
        uniform = torch.full((1, 4, 8, 8), 0.25)
        labels = torch.randint(0, 4, (1, 8, 8))
        seg_m, seg_bar = segmentation_loss(uniform, uniform, labels)
        assert seg_m.item() == pytest.approx(math.log(4), abs=1e-5)
        assert seg_bar.item() == pytest.approx(math.log(4), abs=1e-5)

    def test_perfect_prediction_near_zero(self):
        labels = torch.randint(0, 3, (2, 4, 4))
        one_hot = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).float()
        seg_m, _ = segmentation_loss(one_hot, one_hot, labels)
        assert seg_m.item() < 1e-5

    def test_label_out_of_range(self, prob_map):
        labels = torch.full((2, 8, 8), 4)
        with pytest.raises(ValueError, match=r"\[0, 3\]"):
            segmentation_loss(prob_map, prob_map, labels)


class TestJointPair:
    def test_variant_channels(self, prob_map):
        image = torch.zeros(2, 1, 8, 8)
        for variant in PairVariant:
            pair = make_joint_pair(image, prob_map, variant)
            if variant is PairVariant.IMG_SEG_PER_SOI:
                assert len(pair) == 3
                assert all(p.shape == (2, 2, 8, 8) for p in pair)
            else:
                assert pair.shape[1] == variant.input_channels(4)

    def test_default_is_image_plus_psi(self, prob_map):
        image = torch.randn(2, 1, 8, 8)
        pair = make_joint_pair(image, prob_map)
        torch.testing.assert_close(pair[:, :1], image)
        torch.testing.assert_close(pair[:, 1:], aggregate_soi_probability(prob_map))

    def test_misaligned(self, prob_map):
        with pytest.raises(ValueError, match="not aligned"):
            make_joint_pair(torch.zeros(2, 1, 16, 16), prob_map)

    def test_per_soi_discriminator_count(self):
        assert PairVariant.IMG_SEG_PER_SOI.num_discriminators(4) == 3
        assert PairVariant.IMG_SEG_AGG.num_discriminators(4) == 1


class TestStructureLosses:
    def test_per_soi_average(self):
        reals = [torch.ones(1, 1, 2, 2), torch.ones(1, 1, 2, 2)]
        fakes = [torch.zeros(1, 1, 2, 2), torch.ones(1, 1, 2, 2)]
        # second discriminator scores fake as real: (1 - 0)^2 + 1^2 = 1, average 0.5
        assert structure_discriminator_loss(reals, fakes).item() == pytest.approx(0.5)

    def test_generator_loss(self):
        assert structure_generator_loss(torch.ones(1, 1, 2, 2)).item() == 0.0

    def test_count_mismatch(self):
        with pytest.raises(ValueError, match="real and"):
            structure_discriminator_loss([torch.ones(1, 1, 2, 2)], [])


class TestTotals:
    def test_weights_reject_negative(self):
        with pytest.raises(ValueError, match="lambda_cyc"):
            LossWeights(lambda_cyc=-1)

    def test_full_generator_objective(self):
        report = LossReport(adv_cm=1.0, adv_mc=2.0, cyc=0.1, struct_g=0.4, seg_bar_g=0.2)
        total = total_generator_objective(report, LossWeights())
        assert total == pytest.approx(1.0 + 2.0 + 10 * 0.1 + 0.5 * 0.4 + 5 * 0.2)

    def test_setting_2_drops_structure_and_coupling(self):
        report = LossReport(adv_cm=1.0, adv_mc=2.0, cyc=0.1, struct_g=0.4, seg_bar_g=0.2)
        total = total_generator_objective(report, LossWeights(), get_mask_for_setting(2))
        assert total == pytest.approx(1.0 + 2.0 + 1.0)

    def test_setting_1_discriminator(self):
        report = LossReport(disc_m=0.3, disc_c=0.7, struct_d=1.0)
        assert total_discriminator_objective(report, LossWeights(), get_mask_for_setting(1)) == pytest.approx(0.3)

    def test_report_non_finite(self):
        report = LossReport(adv_cm=torch.tensor(float("inf")), cyc=torch.tensor(0.5))
        assert report.non_finite() == ["adv_cm"]
        assert report.detached().cyc == 0.5

    def test_unit_components_with_default_weights(self):
        report = LossReport(adv_cm=0.5, adv_mc=0.5, cyc=1.0, struct_g=1.0, seg_bar_g=1.0)
        assert total_generator_objective(report, LossWeights()) == pytest.approx(16.5)

    def test_all_zero(self):
        assert total_generator_objective(LossReport(), LossWeights()) == 0.0
        assert total_discriminator_objective(LossReport(), LossWeights()) == 0.0


def double(*shape):
    return torch.randn(*shape, dtype=torch.float64, requires_grad=True)


class TestInputGradients:
    """Analytic gradients of each loss against central differences on its inputs."""

    @pytest.fixture(autouse=True)
    def seed(self):
        torch.manual_seed(0)

    @pytest.mark.parametrize("form", list(LossForm))
    def test_adversarial_discriminator(self, form):
        inputs = (double(2, 1, 3, 3), double(2, 1, 3, 3))
        assert torch.autograd.gradcheck(lambda r, f: adversarial_loss(r, f, Role.DISCRIMINATOR, form), inputs)

    @pytest.mark.parametrize("form", list(LossForm))
    def test_adversarial_generator(self, form):
        inputs = (double(2, 1, 3, 3),)
        assert torch.autograd.gradcheck(lambda f: adversarial_loss(None, f, Role.GENERATOR, form), inputs)

    def test_cycle(self):
        assert torch.autograd.gradcheck(cycle_loss, (double(2, 1, 4, 4), double(2, 1, 4, 4)))

    def test_aggregate(self):
        assert torch.autograd.gradcheck(
            lambda z: aggregate_soi_probability(torch.softmax(z, dim=1)), (double(2, 4, 3, 3),)
        )

    def test_segmentation(self):
        labels = torch.randint(0, 4, (2, 3, 3))
        assert torch.autograd.gradcheck(
            lambda a, b: segmentation_loss(torch.softmax(a, dim=1), torch.softmax(b, dim=1), labels),
            (double(2, 4, 3, 3), double(2, 4, 3, 3)),
        )

    @pytest.mark.parametrize("variant", list(PairVariant))
    def test_joint_pair(self, variant):
        def pair(image, z):
            out = make_joint_pair(image, torch.softmax(z, dim=1), variant)
            return tuple(out) if isinstance(out, list) else out

        assert torch.autograd.gradcheck(pair, (double(2, 1, 3, 3), double(2, 4, 3, 3)))

    @pytest.mark.parametrize("form", list(LossForm))
    def test_structure_losses(self, form):
        assert torch.autograd.gradcheck(
            lambda r1, r2, f1, f2: structure_discriminator_loss([r1, r2], [f1, f2], form),
            tuple(double(1, 1, 2, 2) for _ in range(4)),
        )
        assert torch.autograd.gradcheck(
            lambda f1, f2: structure_generator_loss([f1, f2], form), (double(1, 1, 2, 2), double(1, 1, 2, 2))
        )

    def test_totals(self):
        def totals(adv, cyc, struct, seg):
            report = LossReport(
                adv_cm=adv, adv_mc=adv, cyc=cyc, struct_g=struct, seg_bar_g=seg,
                disc_m=adv, disc_c=adv, struct_d=struct,
            )
            weights = LossWeights()
            return total_generator_objective(report, weights), total_discriminator_objective(report, weights)

        assert torch.autograd.gradcheck(totals, tuple(double(()) for _ in range(4)))


class TestBatchOrder:
    @pytest.mark.parametrize("form", list(LossForm))
    def test_discriminator_objective_ignores_batch_order(self, form):
        torch.manual_seed(0)
        spec = PatchDiscriminatorSpec(base_width=4, num_layers=3)
        d_m, d_c = PatchDiscriminator(spec).double(), PatchDiscriminator(spec).double()
        d_struct = PatchDiscriminator(PatchDiscriminatorSpec(in_channels=2, base_width=4, num_layers=3)).double()
        x_m, x_cm, x_c, x_mc = (torch.randn(4, 1, 16, 16, dtype=torch.float64) for _ in range(4))
        psi_m, psi_cm = (torch.rand(4, 1, 16, 16, dtype=torch.float64) for _ in range(2))

        def objective(order):
            report = LossReport(
                disc_m=adversarial_loss(d_m(x_m[order]), d_m(x_cm[order]), Role.DISCRIMINATOR, form),
                disc_c=adversarial_loss(d_c(x_c[order]), d_c(x_mc[order]), Role.DISCRIMINATOR, form),
                struct_d=structure_discriminator_loss(
                    d_struct(torch.cat([x_m, psi_m], dim=1)[order]),
                    d_struct(torch.cat([x_cm, psi_cm], dim=1)[order]),
                    form,
                ),
            )
            return total_discriminator_objective(report, LossWeights())

        with torch.no_grad():
            torch.testing.assert_close(objective(torch.arange(4)), objective(torch.tensor([2, 0, 3, 1])))
