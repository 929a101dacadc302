import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from sair import metrics
from sair.errors import InvalidArgumentError, ShapeError
from sair.sample import IGNORE_LABEL


class TestPSNR:
    def test_uniform_error(self):
        gt = torch.full((3, 8, 8), 0.5, dtype=torch.float64)
        assert abs(metrics.psnr(gt + 0.1, gt) - 20.0) <= 1e-9

    def test_identical_is_ceiling(self):
        x = torch.rand(3, 8, 8)
        assert metrics.psnr(x, x) == 100.0
        assert metrics.psnr(x, x, ceiling=60) == 60.0

    def test_masked_region(self):
        gt = torch.zeros(1, 4, 4, dtype=torch.float64)
        pred = gt.clone()
        pred[..., :2] = 0.1
        m = torch.zeros(1, 4, 4)
        m[..., :2] = 1
        assert metrics.psnr(pred, gt, mask=m) == pytest.approx(20.0, abs=1e-9)
        assert np.isnan(metrics.psnr(pred, gt, mask=torch.zeros(1, 4, 4)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            metrics.psnr(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))
        with pytest.raises(ShapeError):
            metrics.ssim(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))
        with pytest.raises(ShapeError):
            metrics.l1(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))


class TestL1:
    def test_inverse_binary(self):
        gt = (torch.rand(3, 8, 8) > 0.5).double()
        assert metrics.l1(1 - gt, gt) == 1.0

    def test_identity(self):
        x = torch.rand(3, 8, 8)
        assert metrics.l1(x, x) == 0.0


class TestSSIM:
    def test_identity(self):
        x = torch.rand(3, 32, 32)
        assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_skimage(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.uniform(size=(3, 40, 36))
        pred = np.clip(gt + rng.normal(scale=0.1, size=gt.shape), 0, 1)
        ref = structural_similarity(pred, gt, data_range=1.0, channel_axis=0, gaussian_weights=True,
                                    sigma=1.5, use_sample_covariance=False)
        assert metrics.ssim(torch.from_numpy(pred), torch.from_numpy(gt)) == pytest.approx(ref, abs=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetric_and_bounded(self, seed):
        g = torch.Generator().manual_seed(seed)
        a, b = torch.rand(3, 16, 16, generator=g), torch.rand(3, 16, 16, generator=g)
        s = metrics.ssim(a, b)
        assert -1 <= s <= 1
        assert s == pytest.approx(metrics.ssim(b, a), abs=1e-12)
        assert metrics.psnr(a, b) == metrics.psnr(b, a)
        assert metrics.l1(a, b) == metrics.l1(b, a)


class TestLPIPS:
    def test_absent_backend(self):
        assert metrics.lpips(torch.rand(3, 8, 8), torch.rand(3, 8, 8), None) is None
        assert metrics.load_lpips_backend("none") is None

    def test_unknown_backend(self):
        with pytest.raises(InvalidArgumentError):
            metrics.load_lpips_backend("ssim")

    def test_contract_with_stub_backend(self):
        # any backend is wrapped as-is; the wrapper clamps tiny negative noise
        backend = lambda p, g: float((torch.as_tensor(p) - torch.as_tensor(g)).abs().mean()) - 1e-9
        x = torch.rand(3, 8, 8)
        assert metrics.lpips(x, x, backend) == 0.0

    def test_real_backend_if_available(self):
        backend = metrics.load_lpips_backend("lpips-alex")
        if backend is None:
            pytest.skip("pretrained LPIPS weights are not available in this environment")
        g = torch.Generator().manual_seed(0)
        x = torch.rand(3, 64, 64, generator=g)
        assert metrics.lpips(x, x, backend) == pytest.approx(0.0, abs=1e-6)
        lo = (x + 0.05 * torch.randn(x.shape, generator=g)).clamp(0, 1)
        hi = (x + 0.3 * torch.randn(x.shape, generator=g)).clamp(0, 1)
        assert metrics.lpips(hi, x, backend) > metrics.lpips(lo, x, backend)


class TestSegmentation:
    def test_exact_anchor(self):
        anchors = torch.nn.functional.normalize(torch.randn(4, 8), dim=-1)
        field = anchors[2].view(8, 1, 1).expand(8, 5, 6)
        assert torch.all(metrics.segment(field, anchors) == 2)

    def test_perturbed_orthogonal(self):
        anchors = torch.eye(3, 8)
        field = (anchors[0] + 0.1 * anchors[1]).view(8, 1, 1).expand(8, 2, 2)
        assert torch.all(metrics.segment(field, anchors) == 0)

    def test_tie_goes_to_lowest(self):
        anchors = torch.eye(2, 4)
        field = (anchors[0] + anchors[1]).view(4, 1, 1)
        assert metrics.segment(field, anchors).item() == 0

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            metrics.segment(torch.zeros(5, 2, 2), torch.eye(3, 4))


class TestMIoU:
    def test_identity(self):
        gt = torch.randint(0, 4, (10, 10))
        assert metrics.miou(gt, gt, 4) == 1.0

    def test_disjoint(self):
        assert metrics.miou(np.ones((4, 4)), np.zeros((4, 4)), 2) == 0.0

    def test_half_overlap_is_one_third(self):
        gt = np.zeros((2, 4), dtype=int)
        gt[:, :2] = 1
        pred = np.zeros((2, 4), dtype=int)
        pred[:, 1:3] = 1
        # class 1: |gt|=4, |pred|=4, overlap 2 -> 2/6; class 0 likewise
        assert metrics.miou(pred, gt, 2) == 1 / 3

    def test_ignore_label(self):
        gt = np.array([[0, IGNORE_LABEL]])
        pred = np.array([[0, 1]])
        assert metrics.miou(pred, gt, 2) == 1.0

    def test_only_present_classes(self):
        gt = np.zeros((3, 3), dtype=int)
        assert metrics.miou(gt, gt, 10) == 1.0

    def test_range_check(self):
        with pytest.raises(InvalidArgumentError):
            metrics.miou(np.array([3]), np.array([0]), 2)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_relabel_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, 5, (8, 8))
        pred = rng.integers(0, 5, (8, 8))
        perm = rng.permutation(5)
        assert metrics.miou(perm[pred], perm[gt], 5) == pytest.approx(metrics.miou(pred, gt, 5), abs=1e-12)
