import io
import itertools
import struct

import numpy as np
import pytest

from bd3mg import blur, kernels, volume
from bd3mg import _kernels_np
from bd3mg.blur import (KernelDims, ParamRanges, PsfStack, apply_H, apply_Ht,
                        dirac_stack, gaussian_kernel, generate_psf_stack,
                        read_psf, slab_support, write_psf)
from bd3mg.volume import Dims3, FormatError, SliceBlock

from reference import naive_apply_H, naive_apply_Ht


def random_stack(dims, kdims=(3, 3, 5), seed=0):
    return generate_psf_stack(Dims3(*dims), KernelDims(*kdims), seed=seed)


class TestKernelGeneration:
    def test_isotropic_point_ranges_permutation_symmetric(self):
        s = 1.2
        point = ParamRanges(sigma1=(s, s), sigma2=(s, s), sigma3=(s, s),
                            phi=(0.0, 0.0), theta=(0.0, 0.0))
        psf = generate_psf_stack(Dims3(8, 8, 4), KernelDims(5, 5, 5), point, 1)
        first = psf.kernels[0]
        for k in psf.kernels:
            np.testing.assert_allclose(k, first, rtol=0, atol=1e-15)
        for perm in itertools.permutations((0, 1, 2)):
            np.testing.assert_allclose(first, first.transpose(perm),
                                       rtol=0, atol=1e-12)

    def test_normalisation_contract(self):
        psf = random_stack((7, 6, 5), seed=4)
        sums = psf.kernels.reshape(5, -1).sum(axis=1)
        assert np.abs(sums - 1.0).max() <= 1e-12
        assert psf.kernels.min() >= 0.0

    def test_tiny_sigma_concentrates_mass(self):
        k = gaussian_kernel(KernelDims(5, 5, 5), 0.05, 0.05, 0.05, 0.3, 0.7)
        assert k[2, 2, 2] >= 0.999

    def test_rotation_changes_kernel(self):
        a = gaussian_kernel(KernelDims(7, 7, 5), 0.8, 2.0, 1.2, 0.0, 0.0)
        b = gaussian_kernel(KernelDims(7, 7, 5), 0.8, 2.0, 1.2, 1.0, 0.4)
        assert np.abs(a - b).max() > 1e-3

    def test_invalid_inputs(self):
        with pytest.raises(ValueError, match="odd"):
            KernelDims(2, 3, 3).validate()
        with pytest.raises(ValueError, match="positive"):
            gaussian_kernel(KernelDims(3, 3, 3), 0.0, 1.0, 1.0, 0, 0)
        with pytest.raises(ValueError, match="lo > hi"):
            ParamRanges(sigma1=(2.0, 1.0)).validate()
        with pytest.raises(ValueError, match="exceeds"):
            generate_psf_stack(Dims3(4, 4, 2), KernelDims(3, 3, 5), seed=0)

    def test_generation_deterministic(self):
        a = random_stack((6, 6, 4), seed=9)
        b = random_stack((6, 6, 4), seed=9)
        assert np.array_equal(a.kernels, b.kernels)
        assert np.array_equal(a.params, b.params)


class TestOperator:
    def test_zero_in_zero_out(self):
        psf = random_stack((6, 6, 4))
        assert not apply_H(psf, np.zeros((4, 6, 6))).any()
        assert not apply_Ht(psf, np.zeros((4, 6, 6))).any()

    def test_dirac_is_identity(self, rng):
        psf = dirac_stack(Dims3(6, 5, 4), KernelDims(3, 3, 3))
        x = rng.standard_normal((4, 5, 6))
        assert np.array_equal(apply_H(psf, x), x)
        assert np.array_equal(apply_Ht(psf, x), x)

    def test_impulse_response_matches_naive(self):
        psf = random_stack((8, 8, 6), kdims=(3, 5, 3), seed=2)
        x = np.zeros((6, 8, 8))
        x[3, 4, 4] = 1.0
        np.testing.assert_allclose(apply_H(psf, x), naive_apply_H(psf.kernels, x),
                                   rtol=0, atol=1e-14)

    def test_random_volume_matches_naive(self, rng):
        psf = random_stack((10, 9, 8), kdims=(5, 3, 5), seed=6)
        x = rng.standard_normal((8, 9, 10))
        got = apply_H(psf, x)
        want = naive_apply_H(psf.kernels, x)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-13)
        vt = rng.standard_normal((8, 9, 10))
        np.testing.assert_allclose(apply_Ht(psf, vt), naive_apply_Ht(psf.kernels, vt),
                                   rtol=1e-12, atol=1e-13)

    def test_adjoint_100_random_pairs(self, rng):
        for trial in range(10):
            psf = random_stack((8, 8, 6), kdims=(3, 3, 5), seed=trial)
            for _ in range(10):
                x = rng.standard_normal((6, 8, 8))
                v = rng.standard_normal((6, 8, 8))
                lhs = np.vdot(apply_H(psf, x), v)
                rhs = np.vdot(x, apply_Ht(psf, v))
                bound = 1e-10 * np.linalg.norm(x) * np.linalg.norm(v)
                assert abs(lhs - rhs) <= bound

    def test_linearity(self, rng):
        psf = random_stack((7, 6, 5), seed=8)
        x = rng.standard_normal((5, 6, 7))
        y = rng.standard_normal((5, 6, 7))
        a, b = 1.7, -0.4
        lhs = apply_H(psf, a * x + b * y)
        rhs = a * apply_H(psf, x) + b * apply_H(psf, y)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-14)

    def test_dims_mismatch(self):
        psf = random_stack((6, 6, 4))
        with pytest.raises(ValueError, match="dims"):
            apply_H(psf, np.zeros((4, 6, 7)))


class TestSlabSupport:
    def test_stencil_only(self):
        psf = dirac_stack(Dims3(4, 4, 8), KernelDims(1, 1, 1))
        assert slab_support(psf, SliceBlock(3, 3)) == SliceBlock(2, 4)

    def test_blur_reach(self):
        psf = dirac_stack(Dims3(4, 4, 24), KernelDims(3, 3, 5))
        assert slab_support(psf, SliceBlock(10, 10)) == SliceBlock(5, 15)

    def test_clamped_at_zero(self):
        psf = dirac_stack(Dims3(4, 4, 8), KernelDims(3, 3, 5))
        assert slab_support(psf, SliceBlock(0, 1)) == SliceBlock(0, 6)

    def test_clamped_at_far_face(self):
        psf = dirac_stack(Dims3(4, 4, 8), KernelDims(3, 3, 3))
        assert slab_support(psf, SliceBlock(6, 7)) == SliceBlock(3, 7)

    def test_restriction_consistency_exact(self, rng):
        psf = random_stack((8, 8, 12), kdims=(3, 3, 3), seed=5)
        x = rng.standard_normal((12, 8, 8))
        full = apply_H(psf, x)
        for blk in (SliceBlock(4, 5), SliceBlock(0, 1), SliceBlock(10, 11)):
            slab = slab_support(psf, blk)
            rows = blur.apply_H_rows(psf, x[slab.z_lo:slab.z_hi + 1],
                                     slab.z_lo, blk.z_lo, blk.z_hi)
            assert np.array_equal(rows, full[blk.z_lo:blk.z_hi + 1])


class TestBackends:
    def test_forward_and_adjoint_agree(self, rng):
        psf = random_stack((7, 8, 6), kdims=(5, 3, 3), seed=1)
        x = rng.standard_normal((6, 8, 7))
        a = kernels.depthvar_correlate(x, psf.kernels, 0, 0, 5)
        b = _kernels_np.depthvar_correlate(x, psf.kernels, 0, 0, 5)
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-14)
        c = kernels.depthvar_correlate_adjoint(x, psf.kernels, 0, 0, 5)
        d = _kernels_np.depthvar_correlate_adjoint(x, psf.kernels, 0, 0, 5)
        np.testing.assert_allclose(c, d, rtol=1e-13, atol=1e-14)

    def test_fallback_slab_consistency_exact(self, rng):
        # the pure path must also satisfy bitwise slab/full agreement
        psf = random_stack((6, 6, 10), kdims=(3, 3, 5), seed=3)
        x = rng.standard_normal((10, 6, 6))
        full = _kernels_np.depthvar_correlate(x, psf.kernels, 0, 0, 9)
        rows = _kernels_np.depthvar_correlate(x[1:10], psf.kernels, 1, 4, 5)
        assert np.array_equal(rows, full[4:6])


class TestPsfContainer:
    def test_roundtrip(self):
        psf = random_stack((6, 5, 4), kdims=(3, 5, 3), seed=12)
        buf = io.BytesIO()
        write_psf(psf, buf)
        buf.seek(0)
        back = read_psf(buf)
        assert back.dims == psf.dims and back.kdims == psf.kdims
        assert np.array_equal(back.kernels, psf.kernels)
        assert np.array_equal(back.params, psf.params)

    def test_header_layout(self):
        psf = dirac_stack(Dims3(2, 3, 4), KernelDims(1, 1, 1))
        buf = io.BytesIO()
        write_psf(psf, buf)
        raw = buf.getvalue()
        assert raw[:8] == b"BD3MGPSF"
        assert struct.unpack("<I", raw[8:12]) == (1,)
        assert struct.unpack("<III", raw[12:24]) == (2, 3, 4)
        assert struct.unpack("<III", raw[24:36]) == (1, 1, 1)
        # 4 parameter records of five float64, then 4 one-voxel kernels
        assert len(raw) == 36 + 4 * 5 * 8 + 4 * 8

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="bad magic"):
            read_psf(io.BytesIO(b"BD3MGVOL" + b"\0" * 40))

    def test_truncated(self):
        psf = random_stack((4, 4, 3))
        buf = io.BytesIO()
        write_psf(psf, buf)
        raw = buf.getvalue()[:-4]
        with pytest.raises(FormatError, match="truncated"):
            read_psf(io.BytesIO(raw))

    def test_stack_validation(self):
        bad = np.full((2, 1, 1, 1), 0.5)  # sums 0.5, not 1
        with pytest.raises(ValueError, match="sum"):
            PsfStack(Dims3(3, 3, 2), KernelDims(1, 1, 1), bad)
