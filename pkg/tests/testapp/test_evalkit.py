from __future__ import annotations

import csv
import math

import pytest
import torch
from django.test import SimpleTestCase
from hypothesis import given, settings
from hypothesis import strategies as st

from instance_rsr.backbone import Backbone, BackboneConfig
from instance_rsr.codec import PatchCodec
from instance_rsr.diffusion import NoiseSchedule
from instance_rsr.evalkit import (
    EvalReport,
    ImageScores,
    bicubic_upsample,
    evaluate_dirs,
    feature_dist,
    mask_iou,
    psnr,
    sampling_step_sweep,
    score_pair,
    ssim,
)
from instance_rsr.exceptions import ConfigError, ShapeError
from instance_rsr.pipeline import SuperResolver
from instance_rsr.synthdata import (
    SceneSpec,
    encode_mask_rgb,
    generate_scene,
    mask_color_agreement,
    save_png,
    save_sample,
)
from instance_rsr.teacher import TeacherEncoder
from instance_rsr.utils import make_generator
from tests.testapp.utils import (
    bicubic_psnr,
    held_out_pairs,
    make_tmp_dir,
    random_image,
    reference_config,
    reference_run,
)


class MetricTests(SimpleTestCase):
    def test_psnr(self):
        a = torch.zeros(4, 4, 3, dtype=torch.float64)
        b = torch.full_like(a, 0.1)
        assert psnr(a, b) == pytest.approx(20.0)

    def test_psnr_identical_is_capped(self):
        a = random_image(4, 4)
        assert psnr(a, a) == 99.0
        assert psnr(a, a, cap=60.0) == 60.0

    def test_psnr_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(random_image(4, 4), random_image(4, 5))

    @settings(deadline=None, max_examples=25)
    @given(st.integers(0, 2**16), st.integers(0, 2**16))
    def test_psnr_symmetric(self, seed_a, seed_b):
        a, b = random_image(8, 8, seed=seed_a), random_image(8, 8, seed=seed_b)
        assert psnr(a, b) == psnr(b, a)

    @settings(deadline=None, max_examples=25)
    @given(st.integers(0, 2**16), st.integers(0, 2**16))
    def test_ssim_symmetric(self, seed_a, seed_b):
        a, b = random_image(16, 16, seed=seed_a), random_image(16, 16, seed=seed_b)
        assert abs(ssim(a, b) - ssim(b, a)) <= 1e-9

    @settings(deadline=None, max_examples=25)
    @given(
        st.integers(0, 2**16),
        st.floats(0.005, 0.2),
        st.floats(1.1, 4.0),
    )
    def test_psnr_falls_as_noise_grows(self, seed, sigma, factor):
        a = random_image(8, 8, seed=seed)
        noise = torch.randn(a.shape, generator=make_generator(seed), dtype=a.dtype)
        assert psnr(a, a + factor * sigma * noise) < psnr(a, a + sigma * noise)

    def test_ssim_identical(self):
        a = random_image(16, 16)
        assert ssim(a, a) == pytest.approx(1.0)

    def test_ssim_drops_with_noise(self):
        a = random_image(16, 16)
        noisy = (a + 0.2 * random_image(16, 16, seed=1)).clamp(0, 1)
        assert ssim(a, noisy) < 0.99

    def test_ssim_needs_window(self):
        with pytest.raises(ShapeError):
            ssim(random_image(8, 8), random_image(8, 8))

    def test_mask_iou(self):
        gt = torch.tensor([[1, 1, 2, 2], [0, 0, 0, 0]])
        pred = torch.tensor([[1, 0, 2, 2], [0, 0, 0, 2]])
        assert mask_iou(pred, gt) == {1: 0.5, 2: pytest.approx(2 / 3)}

    def test_feature_dist(self):
        teacher = TeacherEncoder(patch_size=4, dim=8).double()
        a = random_image(8, 8)
        assert feature_dist(a, a, teacher) == pytest.approx(0.0, abs=1e-12)
        assert feature_dist(a, 1.0 - a, teacher) > 0.0

    def test_bicubic_upsample(self):
        lr = torch.full((4, 4, 3), 0.5, dtype=torch.float64)
        out = bicubic_upsample(lr, 4)
        assert out.shape == (16, 16, 3)
        assert torch.allclose(out, torch.full_like(out, 0.5))
        assert bicubic_upsample(lr[None], 2).shape == (1, 8, 8, 3)


class ReportTests(SimpleTestCase):
    def test_aggregate_skips_missing(self):
        report = EvalReport(
            [
                ImageScores("a", psnr=20.0, ssim=0.5, mean_iou=1.0),
                ImageScores("b", psnr=30.0, ssim=0.7),
            ]
        )
        mean = report.aggregate()
        assert mean["psnr"] == 25.0
        assert mean["ssim"] == pytest.approx(0.6)
        assert mean["mean_iou"] == 1.0
        assert "feature_dist" not in mean

    def test_write_csv(self):
        path = make_tmp_dir(self) / "report.csv"
        EvalReport([ImageScores("a", psnr=20.0, ssim=0.5)]).write_csv(path)
        with open(path, newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert [row["name"] for row in rows] == ["a", "mean"]
        assert rows[0]["feature_dist"] == ""
        assert float(rows[1]["psnr"]) == 20.0

    def test_score_pair(self):
        image = random_image(16, 16)
        mask = torch.zeros(16, 16, dtype=torch.long)
        mask[:8] = 1
        scores = score_pair("x", image, image, pred_mask=mask, gt_mask=mask)
        assert scores.psnr == 99.0
        assert scores.mean_iou == 1.0
        assert scores.feature_dist is None


class EvaluateDirsTests(SimpleTestCase):
    def setUp(self):
        self.gt_dir = make_tmp_dir(self)
        self.pred_dir = make_tmp_dir(self)
        self.scenes = [
            generate_scene(SceneSpec(width=16, height=16, num_instances=2, seed=seed))
            for seed in range(2)
        ]
        for scene in self.scenes:
            save_sample(scene, self.gt_dir)

    def test_perfect_predictions(self):
        for scene in self.scenes:
            save_png(scene.image, self.pred_dir / f"{scene.name}_img.png")
            mask_path = self.pred_dir / f"{scene.name}_mask.png"
            save_png(encode_mask_rgb(scene.mask), mask_path)
        teacher = TeacherEncoder(patch_size=4, dim=8).double()
        report = evaluate_dirs(self.pred_dir, self.gt_dir, teacher)
        assert [row.name for row in report.rows] == ["scene_0", "scene_1"]
        mean = report.aggregate()
        assert mean["psnr"] == 99.0
        assert mean["mean_iou"] == 1.0
        assert mean["feature_dist"] == pytest.approx(0.0, abs=1e-9)

    def test_missing_prediction(self):
        save_png(self.scenes[0].image, self.pred_dir / "scene_0_img.png")
        with pytest.raises(ConfigError, match="scene_1"):
            evaluate_dirs(self.pred_dir, self.gt_dir)

    def test_empty_ground_truth(self):
        with pytest.raises(ConfigError):
            evaluate_dirs(self.pred_dir, make_tmp_dir(self))


class SamplingStepSweepTests(SimpleTestCase):
    def test_sweep(self):
        config = BackboneConfig.for_case(0, 2, (2, 2), depth=1, width=8, heads=2)
        resolver = SuperResolver(
            Backbone(config).double(), NoiseSchedule.linear(T=10), PatchCodec(2)
        )
        pairs = [
            (random_image(2, 2, seed=i), random_image(4, 4, seed=i)) for i in range(2)
        ]
        sweep = sampling_step_sweep(resolver, pairs, steps=(2, 5))
        assert sorted(sweep) == [2, 5]
        assert all(math.isfinite(value) for value in sweep.values())


@pytest.mark.slow
class ReferenceRunTests(SimpleTestCase):
    def setUp(self):
        self.config = reference_config(0)
        self.trainer, _ = reference_run(0)

    def test_more_sampling_steps_help_and_beat_bicubic(self):
        sweep = sampling_step_sweep(
            self.trainer.resolver(), held_out_pairs(self.config), steps=(5, 10)
        )
        assert sweep[10] >= sweep[5]
        assert sweep[10] > bicubic_psnr(self.config)

    def test_mask_colors_snap(self):
        lr = torch.stack([lr for lr, _ in held_out_pairs(self.config)])
        result = self.trainer.resolver().super_resolve(
            lr, steps=10, generator=make_generator(0)
        )
        assert mask_color_agreement(result.mask_rgb) > 0.9
