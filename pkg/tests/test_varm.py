import numpy as np
import pytest

from scripts.autograd import Tensor
from scripts.segmentation.cam import IGNORE_INDEX, Cam, PseudoLabel, cam_to_pseudo_label
from scripts.segmentation.varm import (
    VarmConfig,
    correction_kernel,
    local_kernel,
    neighbor_offsets,
    pixel_variation,
    refine,
    refine_label_map,
    refine_pseudo_label,
)


def softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def test_default_neighborhood_has_49_taps():
    offsets = neighbor_offsets(VarmConfig().dilations)
    assert offsets.shape == (49, 2)
    assert tuple(offsets[0]) == (0, 0)
    assert len({tuple(o) for o in offsets}) == 49


def test_config_validation():
    with pytest.raises(ValueError):
        VarmConfig(alpha=0)
    with pytest.raises(ValueError):
        VarmConfig(beta=-0.1)
    with pytest.raises(ValueError):
        VarmConfig(dilations=(0, 1))


def test_pixel_variation_matches_loop(rng):
    img = rng.uniform(size=(4, 5, 3))
    v = pixel_variation(img).data
    for i in range(4):
        for j in range(5):
            left = img[i, max(j - 1, 0)]
            below = img[min(i + 1, 3), j]
            expected = ((left - img[i, j]) ** 2 + (below - img[i, j]) ** 2).sum()
            assert v[i, j] == pytest.approx(expected, abs=1e-12)


class TestKernel:
    def test_rows_sum_to_one(self, rng):
        kernel = correction_kernel(rng.uniform(size=(12, 12, 3)), VarmConfig())
        np.testing.assert_allclose(kernel.weights.sum(axis=2), 1.0, atol=1e-6)
        assert kernel.weights.min() >= 0

    def test_zero_beta_is_plain_rgb_affinity(self, rng):
        img = rng.uniform(size=(10, 10, 3))
        cfg = VarmConfig(beta=0.0)
        expected = softmax(local_kernel(img, cfg), axis=2)
        np.testing.assert_array_equal(correction_kernel(img, cfg).weights, expected)

    def test_beta_changes_kernel(self, rng):
        img = rng.uniform(size=(10, 10, 3))
        plain = correction_kernel(img, VarmConfig(beta=0.0)).weights
        corrected = correction_kernel(img, VarmConfig(beta=0.5)).weights
        assert not np.allclose(plain, corrected)

    def test_constant_image_gives_uniform_rows(self):
        kernel = correction_kernel(np.full((6, 6, 3), 0.4), VarmConfig())
        np.testing.assert_allclose(kernel.weights, 1.0 / 49, atol=1e-12)


class TestRefine:
    def test_constant_scores_are_fixed_point(self, rng):
        scores = np.full((12, 12, 3), 0.37)
        out = refine(scores, rng.uniform(size=(12, 12, 3)), VarmConfig()).data
        np.testing.assert_allclose(out, 0.37, atol=1e-12)

    def test_range_preserved_per_class(self, rng):
        scores = rng.uniform(0.2, 0.7, size=(12, 12, 2))
        out = refine(scores, rng.uniform(size=(12, 12, 3)), VarmConfig()).data
        assert np.all(out.min(axis=(0, 1)) >= scores.min(axis=(0, 1)) - 1e-12)
        assert np.all(out.max(axis=(0, 1)) <= scores.max(axis=(0, 1)) + 1e-12)

    def test_zero_iterations_is_identity(self, rng):
        scores = rng.uniform(size=(6, 6, 2))
        out = refine(scores, rng.uniform(size=(6, 6, 3)), VarmConfig(iterations=0)).data
        np.testing.assert_array_equal(out, scores)

    def test_scores_outside_unit_interval_rejected(self, rng):
        with pytest.raises(ValueError):
            refine(np.full((4, 4, 1), 1.5), rng.uniform(size=(4, 4, 3)), VarmConfig())

    def test_refined_output_carries_no_gradient(self, rng):
        scores = Tensor(rng.uniform(size=(6, 6, 2)), requires_grad=True)
        assert not refine(scores, rng.uniform(size=(6, 6, 3)), VarmConfig()).requires_grad

    def test_noisy_two_region_labels_get_cleaner(self, two_region):
        image, clean, noisy = two_region
        refined = refine_label_map(PseudoLabel(noisy, num_classes=2), image, VarmConfig()).labels
        before = np.mean(noisy == clean)
        after = np.mean(refined == clean)
        assert after > before


class TestLabelRefinement:
    def test_zero_iterations_pass_through_with_ignore(self, rng):
        labels = rng.integers(0, 3, size=(8, 8)).astype(np.uint8)
        labels[0, :3] = IGNORE_INDEX
        out = refine_label_map(PseudoLabel(labels, 2), rng.uniform(size=(8, 8, 3)), VarmConfig(iterations=0))
        np.testing.assert_array_equal(out.labels, labels)

    def test_all_ignore_stays_ignore(self, rng):
        labels = np.full((6, 6), IGNORE_INDEX, dtype=np.uint8)
        out = refine_label_map(PseudoLabel(labels, 2), rng.uniform(size=(6, 6, 3)), VarmConfig())
        assert np.all(out.labels == IGNORE_INDEX)

    def test_pseudo_label_without_iterations_equals_thresholding(self, rng):
        cam = Cam(Tensor(rng.uniform(size=(8, 8, 2))), normalized=True)
        direct = cam_to_pseudo_label(cam).labels
        refined = refine_pseudo_label(cam, rng.uniform(size=(8, 8, 3)), VarmConfig(iterations=0)).labels
        np.testing.assert_array_equal(refined, direct)

    def test_pseudo_label_needs_normalized_cam(self, rng):
        with pytest.raises(ValueError):
            refine_pseudo_label(Cam(Tensor(np.ones((4, 4, 1)))), np.ones((4, 4, 3)), VarmConfig())


def naive_kernel(img, alpha, beta):
    """Loop-by-loop 3x3 (dilation 1) correction kernel with clamped borders."""
    height, width = img.shape[:2]
    taps = [(0, 0)] + [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx]

    def at(i, j):
        return img[min(max(i, 0), height - 1), min(max(j, 0), width - 1)]

    variation = np.zeros((height, width))
    for i in range(height):
        for j in range(width):
            variation[i, j] = ((at(i, j - 1) - img[i, j]) ** 2 + (at(i + 1, j) - img[i, j]) ** 2).sum()

    weights = np.zeros((height, width, len(taps)))
    for i in range(height):
        for j in range(width):
            diffs = np.array([np.abs(img[i, j] - at(i + dy, j + dx)).mean() for dy, dx in taps])
            sigma = max(diffs.std(), 1e-6)
            affinity = softmax(-((alpha * diffs) ** 2) / sigma ** 2, axis=0)
            if beta == 0:
                weights[i, j] = affinity
                continue
            v = np.array([variation[min(max(i + dy, 0), height - 1), min(max(j + dx, 0), width - 1)]
                          for dy, dx in taps])
            row = np.maximum(affinity - beta * softmax(v, axis=0), 0.0)
            weights[i, j] = row / row.sum() if row.sum() > 0 else affinity
    return weights, taps


def naive_smoothing(scores, img, alpha, iterations):
    """Plain pixel-adaptive smoothing over the 3x3 neighborhood, written as explicit loops."""
    weights, taps = naive_kernel(img, alpha, 0.0)
    height, width = scores.shape[:2]
    current = scores.copy()
    for _ in range(iterations):
        updated = np.zeros_like(current)
        for i in range(height):
            for j in range(width):
                for t, (dy, dx) in enumerate(taps):
                    k = min(max(i + dy, 0), height - 1)
                    l = min(max(j + dx, 0), width - 1)
                    updated[i, j] += weights[i, j, t] * current[k, l]
        current = updated
    return current


class TestOracles:
    def test_correction_kernel_matches_naive_loop(self, rng):
        img = rng.uniform(size=(5, 5, 3))
        expected, _ = naive_kernel(img, 4.0, 0.01)
        kernel = correction_kernel(img, VarmConfig(dilations=(1,), beta=0.01))
        np.testing.assert_allclose(kernel.weights, expected, atol=1e-10)

    def test_zero_beta_matches_plain_pixel_adaptive_smoothing(self, rng):
        img = rng.uniform(size=(6, 5, 3))
        scores = rng.uniform(size=(6, 5, 2))
        out = refine(scores, img, VarmConfig(beta=0.0, dilations=(1,), iterations=3)).data
        np.testing.assert_allclose(out, naive_smoothing(scores, img, 4.0, 3), atol=1e-10)

    def test_constant_image_has_zero_raw_affinity(self):
        k = local_kernel(np.full((5, 5, 3), 0.6), VarmConfig())
        assert np.all(k == 0)

    def test_larger_color_difference_gives_smaller_affinity(self):
        img = np.full((6, 6, 3), 0.2)
        img[:, 3:] = 0.9
        img[4:, :] = 0.5
        k = local_kernel(img, VarmConfig(dilations=(1,)))
        _, taps = naive_kernel(img, 4.0, 0.0)
        for i in range(6):
            for j in range(6):
                diffs = np.array([np.abs(img[i, j] - img[min(max(i + dy, 0), 5), min(max(j + dx, 0), 5)]).mean()
                                  for dy, dx in taps])
                for a in range(len(taps)):
                    for b in range(len(taps)):
                        if diffs[a] < diffs[b] - 1e-12:
                            assert k[i, j, a] > k[i, j, b]


class TestLinearity:
    def test_class_sum_is_preserved(self, rng):
        scores = softmax(rng.normal(size=(12, 12, 3)), axis=-1)
        out = refine(scores, rng.uniform(size=(12, 12, 3)), VarmConfig(dilations=(1, 2, 4))).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


class TestFlip:
    def test_plain_affinity_refinement_is_flip_equivariant(self, rng):
        scores, img = rng.uniform(size=(12, 12, 2)), rng.uniform(size=(12, 12, 3))
        cfg = VarmConfig(beta=0.0, dilations=(1, 2, 4))
        flipped = refine(scores[:, ::-1], img[:, ::-1], cfg).data
        np.testing.assert_allclose(flipped, refine(scores, img, cfg).data[:, ::-1], atol=1e-12)

    def test_variation_correction_breaks_flip_symmetry_within_bound(self, rng):
        # the variation energy reads the left neighbor only, so mirroring changes the kernel;
        # each row moves by at most 4 * beta in L1, which bounds the drift per iteration
        scores, img = rng.uniform(size=(12, 12, 2)), rng.uniform(size=(12, 12, 3))
        cfg = VarmConfig(beta=0.01, dilations=(1, 2, 4))
        flipped = refine(scores[:, ::-1], img[:, ::-1], cfg).data
        deviation = np.abs(flipped - refine(scores, img, cfg).data[:, ::-1]).max()
        assert 0 < deviation <= cfg.iterations * 4 * cfg.beta * np.ptp(scores)
