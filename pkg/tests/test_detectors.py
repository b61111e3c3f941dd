from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lupidet.detectors import (
    DetectorError,
    DetectorHandle,
    TinyDetector,
    build_detector,
    extend_input_channels,
    forward_with_tap,
    load_detector,
    load_into,
    nms,
    parameter_digest,
    registered_architectures,
    save_checkpoint,
)
from lupidet.types import BoundingBox, LabeledObject, ObjectSet

TORCHVISION_ARCHS = [a for a in registered_architectures() if a != "tiny"]


def _scored(*specs):
    return ObjectSet(
        objects=[LabeledObject(box=BoundingBox(*b), label=lbl, score=s) for b, lbl, s in specs]
    )


class TestBuild:
    def test_tiny_handle(self):
        handle = build_detector("tiny", class_count=2)
        assert handle.input_channels == 3
        assert handle.class_count == 2
        assert handle.tap_point_id == "backbone"
        assert handle.parameter_count > 0

    def test_unknown_id_lists_registered(self):
        with pytest.raises(DetectorError, match="tiny"):
            build_detector("resnext_mega", class_count=2)

    def test_tiny_pretrained_unavailable(self):
        with pytest.raises(DetectorError, match="pretrained"):
            build_detector("tiny", class_count=2, pretrained=True)


class TestExtendInputChannels:
    def test_rgb_slice_bitwise_identical(self):
        torch.manual_seed(0)
        handle = build_detector("tiny", class_count=2)
        extended = extend_input_channels(handle)
        old = handle.model.backbone[0].weight
        new = extended.model.backbone[0].weight
        assert torch.equal(new[:, :3], old)
        assert extended.input_channels == 4
        assert handle.input_channels == 3  # original untouched

    def test_double_extension_rejected(self):
        handle = extend_input_channels(build_detector("tiny", class_count=2))
        with pytest.raises(DetectorError, match="4 input channels"):
            extend_input_channels(handle)

    def test_new_slice_scale_matches_kaiming_fan_in(self):
        torch.manual_seed(1)
        samples = []
        for _ in range(30):
            extended = extend_input_channels(build_detector("tiny", class_count=2))
            samples.append(extended.model.backbone[0].weight[:, 3].detach().reshape(-1))
        stds = torch.cat(samples).std().item()
        # fan-in = 4 * 3 * 3 = 36 -> std = sqrt(2/36)
        assert stds == pytest.approx((2 / 36) ** 0.5, rel=0.1)

    def test_zeroed_slice_is_forward_equivalent_tiny(self):
        torch.manual_seed(2)
        handle = build_detector("tiny", class_count=3)
        extended = extend_input_channels(handle)
        with torch.no_grad():
            extended.model.backbone[0].weight[:, 3].zero_()
        x = torch.rand(2, 3, 64, 64)
        x4 = torch.cat([x, torch.rand(2, 1, 64, 64)], dim=1)
        with torch.no_grad():
            out3, tap3 = forward_with_tap(handle, x)
            out4, tap4 = forward_with_tap(extended, x4)
        assert torch.allclose(tap3.tensor, tap4.tensor, atol=1e-5)
        for a, b in zip(out3, out4):
            assert len(a.objects) == len(b.objects)
            for oa, ob in zip(a.objects, b.objects):
                assert oa.label == ob.label
                assert oa.score == pytest.approx(ob.score, abs=1e-5)


class TestForwardWithTap:
    def test_eval_deterministic(self):
        torch.manual_seed(3)
        handle = build_detector("tiny", class_count=2)
        x = torch.rand(1, 3, 64, 64)
        with torch.no_grad():
            _, tap_a = forward_with_tap(handle, x)
            _, tap_b = forward_with_tap(handle, x)
        assert torch.equal(tap_a.tensor, tap_b.tensor)

    def test_batch_feature_lengths_equal(self):
        handle = build_detector("tiny", class_count=2)
        with torch.no_grad():
            _, tap = forward_with_tap(handle, torch.rand(2, 3, 64, 64))
        flat = tap.flattened()
        assert flat.shape[0] == 2
        assert flat.shape[1] == int(np.prod(tap.source_shape))

    def test_tiny_tap_shape_from_architecture(self):
        # stride-8 backbone with 16 output channels: 16x16 input -> 16 x 2 x 2
        handle = build_detector("tiny", class_count=2)
        with torch.no_grad():
            _, tap = forward_with_tap(handle, torch.rand(1, 3, 16, 16))
        assert tap.source_shape == (16, 2, 2)

    def test_channel_mismatch_rejected(self):
        handle = build_detector("tiny", class_count=2)
        with pytest.raises(DetectorError, match="expected"):
            forward_with_tap(handle, torch.rand(1, 4, 32, 32))

    def test_teacher_student_tap_lengths_match(self):
        torch.manual_seed(4)
        student = build_detector("tiny", class_count=3)
        teacher = extend_input_channels(student)
        x = torch.rand(2, 3, 64, 64)
        x4 = torch.cat([x, torch.rand(2, 1, 64, 64)], dim=1)
        with torch.no_grad():
            _, tap_s = forward_with_tap(student, x)
            _, tap_t = forward_with_tap(teacher, x4)
        assert tap_s.flattened().shape == tap_t.flattened().shape

    def test_train_mode_returns_loss_components(self):
        handle = build_detector("tiny", class_count=2)
        targets = [
            {"boxes": torch.tensor([[8.0, 8.0, 40.0, 40.0]]), "labels": torch.tensor([1])}
        ]
        losses, tap = forward_with_tap(handle, torch.rand(1, 3, 64, 64), targets=targets)
        assert set(losses) == {"classification", "box_reg"}
        assert all(torch.is_tensor(v) and v.ndim == 0 for v in losses.values())
        assert tap.tensor.requires_grad


class TestTinyDetectorLearning:
    def test_loss_decreases_on_one_scene(self):
        torch.manual_seed(5)
        model = TinyDetector(class_count=2)
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        x = torch.rand(1, 3, 64, 64)
        targets = [
            {"boxes": torch.tensor([[10.0, 10.0, 34.0, 30.0]]), "labels": torch.tensor([0])}
        ]
        from lupidet.detectors import tiny_detector_loss

        first = None
        for _ in range(60):
            losses = tiny_detector_loss(model, x, targets)
            total = losses["classification"] + losses["box_reg"]
            if first is None:
                first = total.item()
            opt.zero_grad()
            total.backward()
            opt.step()
        assert total.item() < 0.25 * first


class TestNms:
    def test_identical_boxes_same_class(self):
        result = nms(
            _scored(((0, 0, 2, 2), 0, 0.9), ((0, 0, 2, 2), 0, 0.8)), iou_threshold=0.5
        )
        assert len(result.objects) == 1
        assert result.objects[0].score == 0.9

    def test_identical_boxes_different_classes_survive(self):
        result = nms(
            _scored(((0, 0, 2, 2), 0, 0.9), ((0, 0, 2, 2), 1, 0.8)), iou_threshold=0.5
        )
        assert len(result.objects) == 2

    def test_low_overlap_survives(self):
        result = nms(
            _scored(((0, 0, 2, 2), 0, 0.9), ((1, 1, 3, 3), 0, 0.8)), iou_threshold=0.5
        )
        assert len(result.objects) == 2  # IoU = 1/7

    def test_output_sorted_by_score(self):
        result = nms(
            _scored(((0, 0, 2, 2), 0, 0.5), ((5, 5, 7, 7), 1, 0.9)), iou_threshold=0.5
        )
        scores = [o.score for o in result.objects]
        assert scores == sorted(scores, reverse=True)

    def test_unscored_rejected(self):
        detections = ObjectSet(objects=[LabeledObject(box=BoundingBox(0, 0, 1, 1), label=0)])
        with pytest.raises(ValueError, match="score"):
            nms(detections, 0.5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_idempotent_and_no_overlapping_survivors(self, seed):
        rng = np.random.default_rng(seed)
        objects = []
        for _ in range(rng.integers(0, 12)):
            x0, y0 = rng.uniform(0, 40, 2)
            objects.append(
                LabeledObject(
                    box=BoundingBox(x0, y0, x0 + rng.uniform(1, 20), y0 + rng.uniform(1, 20)),
                    label=int(rng.integers(0, 2)),
                    score=float(rng.uniform(0.01, 1.0)),
                )
            )
        detections = ObjectSet(objects=objects)
        once = nms(detections, 0.5)
        twice = nms(once, 0.5)
        assert [o.box for o in once.objects] == [o.box for o in twice.objects]
        from lupidet.metrics import iou as iou_fn

        for i, a in enumerate(once.objects):
            for b in once.objects[i + 1 :]:
                if a.label == b.label:
                    assert iou_fn(a.box, b.box) <= 0.5


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(6)
        handle = build_detector("tiny", class_count=2, image_size=64)
        path = save_checkpoint(handle, tmp_path / "m.ckpt", role="baseline", epoch=3)
        loaded = load_detector(path)
        assert loaded.architecture_id == "tiny"
        assert loaded.image_size == 64
        assert parameter_digest(loaded.model) == parameter_digest(handle.model)

    def test_channel_mismatch_refused_both_ways(self, tmp_path):
        torch.manual_seed(7)
        h3 = build_detector("tiny", class_count=2)
        h4 = extend_input_channels(h3)
        p3 = save_checkpoint(h3, tmp_path / "c3.ckpt")
        p4 = save_checkpoint(h4, tmp_path / "c4.ckpt", role="teacher")
        with pytest.raises(DetectorError, match="refusing"):
            load_into(h3, p4)
        with pytest.raises(DetectorError, match="refusing"):
            load_into(h4, p3)

    def test_four_channel_round_trip(self, tmp_path):
        torch.manual_seed(8)
        h4 = extend_input_channels(build_detector("tiny", class_count=2))
        path = save_checkpoint(h4, tmp_path / "t.ckpt", role="teacher")
        loaded = load_detector(path)
        assert loaded.input_channels == 4
        assert parameter_digest(loaded.model) == parameter_digest(h4.model)

    def test_unreadable_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(DetectorError, match="unreadable"):
            load_detector(path)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(DetectorError, match="not found"):
            load_detector(tmp_path / "absent.ckpt")


@pytest.mark.parametrize("arch", TORCHVISION_ARCHS)
class TestTorchvisionAdapters:
    def test_build_and_extend_equivalence(self, arch):
        torch.manual_seed(9)
        handle = build_detector(arch, class_count=2, image_size=64)
        extended = extend_input_channels(handle)
        conv = extended.model
        for part in extended.adapter.first_conv_path.split("."):
            conv = getattr(conv, part)
        with torch.no_grad():
            conv.weight[:, 3].zero_()
        x = torch.rand(1, 3, 64, 64)
        x4 = torch.cat([x, torch.rand(1, 1, 64, 64)], dim=1)
        with torch.no_grad():
            out3, tap3 = forward_with_tap(handle, x)
            out4, tap4 = forward_with_tap(extended, x4)
        assert torch.allclose(tap3.tensor, tap4.tensor, atol=1e-5)
        assert len(out3[0].objects) == len(out4[0].objects)

    def test_train_mode_losses(self, arch):
        torch.manual_seed(10)
        handle = build_detector(arch, class_count=2, image_size=64)
        targets = [
            {"boxes": torch.tensor([[8.0, 8.0, 40.0, 40.0]]), "labels": torch.tensor([1])}
        ] * 2
        losses, tap = forward_with_tap(handle, torch.rand(2, 3, 64, 64), targets=targets)
        assert losses and all(torch.is_tensor(v) for v in losses.values())
        assert tap.tensor.shape[0] == 2
