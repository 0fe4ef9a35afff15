import math

import numpy as np
import pytest
import torch

from partsqueeze.errors import InvalidInputError, TrainingDivergenceError
from partsqueeze.losses import (
    ArcFaceConfig,
    LayerWeights,
    LossWeights,
    TinyExtractor,
    VggExtractor,
    arcface_loss,
    background_concentration,
    boundary_distance,
    build_extractor,
    foreground_concentration,
    perceptual_loss,
    perceptual_terms,
    total_loss,
)

from conftest import random_seg_map, random_tensor
from oracles import (
    arcface_loop,
    background_concentration_loop,
    central_difference_grad,
    cross_entropy_loop,
    foreground_concentration_loop,
)


@pytest.fixture(scope="module")
def tiny():
    return TinyExtractor(seed=3).double()


class TestPerceptual:
    def test_identical_images_zero(self, tiny):
        x = random_tensor((1, 3, 16, 16), seed=0).clamp(0, 1)
        assert perceptual_loss(x, x.clone(), tiny).item() == pytest.approx(0.0, abs=1e-12)

    def test_linear_in_weights(self, tiny):
        x = random_tensor((1, 3, 16, 16), seed=1).clamp(0, 1)
        y = random_tensor((1, 3, 16, 16), seed=2).clamp(0, 1)
        w1 = {n: 1.0 for n in tiny.tap_names}
        w2 = {n: 2.0 for n in tiny.tap_names}
        a = perceptual_loss(x, y, tiny, w1).item()
        b = perceptual_loss(x, y, tiny, w2).item()
        assert b == pytest.approx(2 * a, rel=1e-10)

    def test_equals_per_tap_oracle(self, tiny):
        # recompute each tap distance outside the loss function
        x = random_tensor((1, 3, 16, 16), seed=3).clamp(0, 1)
        y = random_tensor((1, 3, 16, 16), seed=4).clamp(0, 1)
        loss = perceptual_loss(x, y, tiny).item()
        with torch.no_grad():
            fx, fy = tiny(x), tiny(y)
        expected = 0.0
        for name in tiny.tap_names:
            diff = (fx[name] - fy[name]).numpy()
            expected += float(np.mean(diff * diff))
        assert loss == pytest.approx(expected, abs=1e-5)

    def test_shape_mismatch(self, tiny):
        with pytest.raises(InvalidInputError):
            perceptual_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 16, 16), tiny)

    def test_nonnegative(self, tiny):
        x = random_tensor((1, 3, 16, 16), seed=5).clamp(0, 1)
        y = random_tensor((1, 3, 16, 16), seed=6).clamp(0, 1)
        assert perceptual_loss(x, y, tiny).item() >= 0.0

    def test_gradient_against_central_differences(self, tiny):
        x = random_tensor((1, 3, 8, 8), seed=7).clamp(0, 1)
        base = random_tensor((1, 3, 8, 8), seed=8).clamp(0, 1).numpy()

        def f(arr):
            return float(perceptual_loss(x, torch.as_tensor(arr), tiny))

        xh = torch.tensor(base, requires_grad=True)
        perceptual_loss(x, xh, tiny).backward()
        num = central_difference_grad(f, base, eps=1e-6)
        rel = np.abs(xh.grad.numpy() - num).max() / max(np.abs(num).max(), 1e-10)
        assert rel < 1e-4


class TestVggExtractor:
    def test_tap_shapes(self):
        vgg = VggExtractor()
        x = torch.rand(1, 3, 128, 128)
        with torch.no_grad():
            taps = vgg(x)
        assert taps["input"].shape == (1, 3, 128, 128)
        assert taps["conv1_2"].shape == (1, 64, 128, 128)
        assert taps["conv2_2"].shape == (1, 128, 64, 64)
        assert taps["conv3_2"].shape == (1, 256, 32, 32)
        assert taps["conv4_2"].shape == (1, 512, 16, 16)
        assert taps["conv5_2"].shape == (1, 512, 8, 8)

    def test_frozen_and_deterministic(self):
        vgg = VggExtractor()
        assert not any(p.requires_grad for p in vgg.parameters())
        x = torch.rand(1, 3, 64, 64)
        with torch.no_grad():
            a, b = vgg(x), vgg(x)
        assert torch.equal(a["conv3_2"], b["conv3_2"])

    def test_weight_file_roundtrip(self, tmp_path):
        src = VggExtractor()
        path = tmp_path / "vgg.pth"
        torch.save(src.features.state_dict(), path)
        dst = VggExtractor(str(path))
        x = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            assert torch.equal(src(x)["conv1_2"], dst(x)["conv1_2"])

    def test_build_extractor_kinds(self):
        assert isinstance(build_extractor("tiny"), TinyExtractor)
        assert isinstance(build_extractor("vgg19"), VggExtractor)
        with pytest.raises(InvalidInputError):
            build_extractor("resnet")


class TestLayerWeights:
    def test_initialized_to_one(self):
        lw = LayerWeights(("a", "b"))
        assert lw.weights == {"a": 1.0, "b": 1.0}

    def test_no_refresh_off_schedule(self):
        lw = LayerWeights(("a",))
        for step in range(1, 51):
            lw.observe({"a": torch.tensor(5.0)})
            assert not lw.maybe_refresh(step)
        assert lw.weights["a"] == 1.0

    def test_reciprocal_at_refresh(self):
        lw = LayerWeights(("a", "b"))
        for step in range(1, 101):
            lw.observe({"a": torch.tensor(2.0), "b": torch.tensor(0.5)})
            refreshed = lw.maybe_refresh(step)
        assert refreshed
        assert lw.weights["a"] == pytest.approx(0.5)
        assert lw.weights["b"] == pytest.approx(2.0)

    def test_zero_loss_clamped(self):
        lw = LayerWeights(("a",))
        for step in range(1, 101):
            lw.observe({"a": torch.tensor(0.0)})
            lw.maybe_refresh(step)
        assert lw.weights["a"] == pytest.approx(1e8)

    def test_window_is_recent_mean(self):
        lw = LayerWeights(("a",), window=100)
        # early large observations must have rolled out of the window by the
        # refresh at step 200
        for step in range(1, 51):
            lw.observe({"a": torch.tensor(100.0)})
            lw.maybe_refresh(step)
        for step in range(51, 201):
            lw.observe({"a": torch.tensor(4.0)})
            lw.maybe_refresh(step)
        assert lw.weights["a"] == pytest.approx(0.25)
        # intermediate refresh at step 100 saw the mixed window
        lw2 = LayerWeights(("a",), window=100)
        for step in range(1, 101):
            lw2.observe({"a": torch.tensor(100.0 if step <= 50 else 4.0)})
            lw2.maybe_refresh(step)
        assert lw2.weights["a"] == pytest.approx(1.0 / 52.0)

    def test_state_roundtrip(self):
        lw = LayerWeights(("a", "b"))
        for step in range(1, 120):
            lw.observe({"a": torch.tensor(float(step)), "b": torch.tensor(1.0)})
            lw.maybe_refresh(step)
        clone = LayerWeights(("a", "b"))
        clone.load_state_dict(lw.state_dict())
        assert clone.weights == lw.weights
        assert clone.state_dict() == lw.state_dict()


class TestArcFace:
    def test_margin_zero_is_cross_entropy(self):
        # oracle: plain softmax cross-entropy over s*cos logits
        F = random_tensor((4, 6), seed=10)
        W = random_tensor((3, 6), seed=11)
        s = 20.0
        loss = arcface_loss(F, W, ArcFaceConfig(s=s, m=0.0)).item()
        fn = F[1:] / (F[1:].norm(dim=1, keepdim=True) + 1e-8)
        wn = W / (W.norm(dim=1, keepdim=True) + 1e-8)
        cos = (fn @ wn.T).clamp(-1 + 1e-7, 1 - 1e-7).numpy()
        expected = cross_entropy_loop([list(s * cos[i]) for i in range(3)])
        assert loss == pytest.approx(expected, abs=1e-8)

    def test_aligned_feature_example(self):
        # features exactly on their own basis vectors, orthogonal otherwise
        F = torch.zeros(3, 4, dtype=torch.float64)
        F[1, 0] = 1.0
        F[2, 1] = 1.0
        W = torch.zeros(2, 4, dtype=torch.float64)
        W[0, 0] = 1.0
        W[1, 1] = 1.0
        loss = arcface_loss(F, W, ArcFaceConfig(s=20.0, m=0.5)).item()
        # e^{20 cos 0.5} / (e^{20 cos 0.5} + 1): per-class NLL ~= 2.4e-8
        expected = -math.log(
            math.exp(20 * math.cos(0.5)) / (math.exp(20 * math.cos(0.5)) + 1.0)
        )
        assert expected == pytest.approx(2.4e-8, rel=0.05)
        # the cosine clamp at 1 - 1e-7 perturbs theta by ~4.5e-4 rad, hence
        # the loose relative tolerance against the unclamped closed form
        assert loss == pytest.approx(expected, rel=0.01)
        assert loss <= 1e-6

    def test_permutation_invariance(self):
        F = random_tensor((5, 7), seed=12)
        W = random_tensor((4, 7), seed=13)
        cfg = ArcFaceConfig()
        perm = torch.tensor([2, 0, 3, 1])
        Fp = F.clone()
        Fp[1:] = F[1:][perm]
        loss_a = arcface_loss(F, W, cfg).item()
        loss_b = arcface_loss(Fp, W[perm], cfg).item()
        assert loss_a == pytest.approx(loss_b, abs=1e-10)

    def test_matches_loop_oracle(self):
        F = random_tensor((4, 5), seed=14)
        W = random_tensor((3, 5), seed=15)
        loss = arcface_loss(F, W, ArcFaceConfig(s=20.0, m=0.5)).item()
        ref = arcface_loop(F.numpy(), W.numpy(), 20.0, 0.5)
        assert loss == pytest.approx(ref, abs=1e-10)

    def test_zero_norm_row_acts_as_zero_cosine(self):
        F = random_tensor((3, 4), seed=16)
        F[1] = 0.0
        W = random_tensor((2, 4), seed=17)
        loss = arcface_loss(F, W, ArcFaceConfig())
        assert torch.isfinite(loss)
        ref = arcface_loop(F.numpy(), W.numpy(), 20.0, 0.5)
        assert loss.item() == pytest.approx(ref, abs=1e-10)

    def test_nonnegative(self):
        for seed in range(4):
            F = random_tensor((4, 6), seed=20 + seed)
            W = random_tensor((3, 6), seed=30 + seed)
            assert arcface_loss(F, W, ArcFaceConfig()).item() >= 0.0

    def test_batched_mean(self):
        F = torch.stack([random_tensor((3, 4), seed=40), random_tensor((3, 4), seed=41)])
        W = random_tensor((2, 4), seed=42)
        cfg = ArcFaceConfig()
        batched = arcface_loss(F, W, cfg).item()
        single = 0.5 * (arcface_loss(F[0], W, cfg) + arcface_loss(F[1], W, cfg)).item()
        assert batched == pytest.approx(single, abs=1e-10)

    def test_bad_shapes(self):
        with pytest.raises(InvalidInputError):
            arcface_loss(random_tensor((3, 4), seed=0), random_tensor((3, 4), seed=1))

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            ArcFaceConfig(s=0.0)
        with pytest.raises(InvalidInputError):
            ArcFaceConfig(m=3.5)

    def test_gradient_against_central_differences(self):
        base = random_tensor((4, 5), seed=50).numpy()
        W = random_tensor((3, 5), seed=51)
        cfg = ArcFaceConfig(s=20.0, m=0.5)

        def f(arr):
            return float(arcface_loss(torch.as_tensor(arr), W, cfg))

        F = torch.tensor(base, requires_grad=True)
        arcface_loss(F, W, cfg).backward()
        num = central_difference_grad(f, base, eps=1e-6)
        rel = np.abs(F.grad.numpy() - num).max() / max(np.abs(num).max(), 1e-10)
        assert rel < 1e-4


class TestForegroundConcentration:
    def test_point_masses_zero(self):
        S = torch.zeros(3, 6, 6, dtype=torch.float64)
        S[1, 2, 3] = 1.0
        S[2, 4, 1] = 1.0
        assert foreground_concentration(S).item() == pytest.approx(0.0, abs=1e-12)

    def test_two_pixel_case_exact(self):
        S = torch.zeros(2, 4, 4, dtype=torch.float64)
        S[1, 0, 0] = 0.5
        S[1, 0, 2] = 0.5
        assert foreground_concentration(S).item() == pytest.approx(1.0, abs=1e-6)

    def test_matches_loop_oracle(self):
        for mode in ("verbatim", "sum"):
            for seed in range(3):
                S = random_seg_map(3, 5, 5, seed=60 + seed)
                got = foreground_concentration(S, mode=mode).item()
                ref = foreground_concentration_loop(S.numpy(), mode=mode)
                assert got == pytest.approx(ref, abs=1e-6)

    def test_translation_covariance(self):
        # rigidly moving a pattern leaves its concentration unchanged
        S = torch.zeros(2, 8, 8, dtype=torch.float64)
        S[1, 1, 1] = 0.3
        S[1, 1, 2] = 0.4
        S[1, 2, 1] = 0.3
        moved = torch.zeros_like(S)
        moved[1, 4, 5] = 0.3
        moved[1, 4, 6] = 0.4
        moved[1, 5, 5] = 0.3
        a = foreground_concentration(S).item()
        b = foreground_concentration(moved).item()
        assert a == pytest.approx(b, abs=1e-10)

    def test_background_channel_ignored(self):
        S = random_seg_map(3, 5, 5, seed=70)
        altered = S.clone()
        altered[0] = random_tensor((5, 5), seed=71).abs()
        assert foreground_concentration(S).item() == pytest.approx(
            foreground_concentration(altered).item(), abs=1e-12
        )

    def test_nonnegative(self):
        for seed in range(4):
            S = random_seg_map(4, 6, 6, seed=80 + seed)
            assert foreground_concentration(S).item() >= 0.0

    def test_gradient_against_central_differences(self):
        base = random_seg_map(3, 5, 5, seed=90).numpy()

        def f(arr):
            return float(foreground_concentration(torch.as_tensor(arr)))

        S = torch.tensor(base, requires_grad=True)
        foreground_concentration(S).backward()
        num = central_difference_grad(f, base, eps=1e-6)
        rel = np.abs(S.grad.numpy() - num).max() / max(np.abs(num).max(), 1e-10)
        assert rel < 1e-4


class TestBoundaryDistance:
    def test_boundary_pixel_zero(self):
        h = boundary_distance(8, 8)
        assert h[5, 0].item() == 0.0  # u=0, any v
        assert h[0, 5].item() == 0.0  # v=0

    def test_center_of_32(self):
        h = boundary_distance(32, 32)
        assert h[16, 16].item() == 16.0

    def test_asymmetric_far_edges(self):
        # the far edges use W-u / H-v, so u=W-1 reads 1, not 0
        h = boundary_distance(8, 8)
        assert h[3, 7].item() == 1.0
        assert h[7, 3].item() == 1.0

    def test_reflection_symmetry_shifted(self):
        # h(u) == h(W-u) by construction wherever both are interior
        h = boundary_distance(10, 12).numpy()
        for v in range(1, 9):
            for u in range(1, 11):
                assert h[v, u] == min(u, 12 - u, v, 10 - v)


class TestBackgroundConcentration:
    def test_mass_on_zero_distance_edges(self):
        S = torch.zeros(2, 8, 8, dtype=torch.float64)
        S[0, 0, :] = 0.1  # v = 0 row has h = 0
        S[0, :, 0] = 0.1
        assert background_concentration(S).item() == pytest.approx(0.0, abs=1e-12)

    def test_center_delta_on_32(self):
        S = torch.zeros(2, 32, 32, dtype=torch.float64)
        S[0, 16, 16] = 1.0
        assert background_concentration(S).item() == pytest.approx(256.0, abs=1e-6)

    def test_matches_loop_oracle(self):
        for mode in ("verbatim", "sum"):
            for seed in range(3):
                S = random_seg_map(3, 5, 5, seed=100 + seed)
                got = background_concentration(S, mode=mode).item()
                ref = background_concentration_loop(S.numpy(), mode=mode)
                assert got == pytest.approx(ref, abs=1e-6)

    def test_foreground_channels_ignored(self):
        S = random_seg_map(3, 5, 5, seed=110)
        altered = S.clone()
        altered[1:] = random_tensor((2, 5, 5), seed=111).abs()
        assert background_concentration(S).item() == pytest.approx(
            background_concentration(altered).item(), abs=1e-12
        )

    def test_gradient_against_central_differences(self):
        base = random_seg_map(3, 5, 5, seed=120).numpy()

        def f(arr):
            return float(background_concentration(torch.as_tensor(arr)))

        S = torch.tensor(base, requires_grad=True)
        background_concentration(S).backward()
        num = central_difference_grad(f, base, eps=1e-6)
        rel = np.abs(S.grad.numpy() - num).max() / max(np.abs(num).max(), 1e-10)
        assert rel < 1e-4


class TestTotalLoss:
    def _components(self, v=1.0):
        return tuple(torch.tensor(float(v)) for _ in range(4))

    def test_zero_weights(self):
        rec, cls, fg, bg = self._components(3.7)
        w = LossWeights(rec=0, cls=0, fg=0, bg=0)
        assert total_loss(rec, cls, fg, bg, w).item() == 0.0

    def test_reference_face_weights(self):
        # weights (1.5, 1.5, 0.5, 1.0) on unit components sum to 4.5
        rec, cls, fg, bg = self._components(1.0)
        w = LossWeights(rec=1.5, cls=1.5, fg=0.5, bg=1.0)
        assert total_loss(rec, cls, fg, bg, w).item() == pytest.approx(4.5)

    def test_scaling_linearity(self):
        rec, cls, fg, bg = (torch.tensor(v) for v in (0.3, 1.2, 0.9, 2.2))
        w1 = LossWeights(rec=1.5, cls=1.0, fg=0.5, bg=0.1)
        w3 = LossWeights(rec=4.5, cls=3.0, fg=1.5, bg=0.3)
        a = total_loss(rec, cls, fg, bg, w1).item()
        b = total_loss(rec, cls, fg, bg, w3).item()
        assert b == pytest.approx(3 * a, rel=1e-6)

    def test_nonfinite_component_identified(self):
        rec, cls, fg, bg = self._components()
        with pytest.raises(TrainingDivergenceError) as exc:
            total_loss(rec, torch.tensor(float("nan")), fg, bg, LossWeights())
        assert exc.value.component == "cls"

    def test_negative_weight_rejected(self):
        with pytest.raises(InvalidInputError):
            LossWeights(rec=-0.1)
