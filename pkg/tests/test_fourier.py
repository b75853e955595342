import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from jointmri import fourier
from jointmri.errors import ContractError, DimensionError
from jointmri.fourier import ComplexGrid, fft2c, ifft2c, undersample, zero_filled_recon


def dft2c_bruteforce(img: np.ndarray) -> np.ndarray:
    """Centered orthonormal DFT by direct summation, O(N^2).

    Pixel (m, n) sits at spatial offset (m - H//2, n - W//2) and coefficient
    (k, l) at frequency (k - H//2, l - W//2).
    """
    H, W = img.shape
    out = np.zeros((H, W), dtype=complex)
    for k in range(H):
        for l in range(W):
            acc = 0j
            for m in range(H):
                for n in range(W):
                    phase = (k - H // 2) * (m - H // 2) / H + (l - W // 2) * (n - W // 2) / W
                    acc += img[m, n] * np.exp(-2j * np.pi * phase)
            out[k, l] = acc / np.sqrt(H * W)
    return out


def random_grid(rng, n, layout=fourier.IMAGE):
    z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return ComplexGrid.from_complex(torch.from_numpy(z), layout)


def test_impulse_gives_flat_spectrum():
    img = np.zeros((8, 8))
    img[4, 4] = 1.0
    k = fft2c(ComplexGrid.from_real(img)).numpy()
    np.testing.assert_allclose(np.abs(k), 1 / 8, atol=1e-12)


def test_zero_grid_maps_to_zero():
    z = ComplexGrid.from_real(np.zeros((8, 8)))
    assert fft2c(z).abs().max() == 0
    assert ifft2c(ComplexGrid.from_real(np.zeros((8, 8)), fourier.KSPACE)).abs().max() == 0


def test_matches_bruteforce_dft_16x16():
    rng = np.random.default_rng(3)
    g = random_grid(rng, 16)
    expected = dft2c_bruteforce(g.numpy())
    got = fft2c(g).numpy()
    assert np.abs(got - expected).max() < 1e-6
    # odd size exercises the shift convention differently
    g5 = random_grid(rng, 5)
    np.testing.assert_allclose(fft2c(g5).numpy(), dft2c_bruteforce(g5.numpy()), atol=1e-9)


def test_constant_kspace_gives_center_impulse():
    k = ComplexGrid.from_real(np.full((8, 8), 1 / 8), fourier.KSPACE)
    img = ifft2c(k).numpy()
    expected = np.zeros((8, 8))
    expected[4, 4] = 1.0
    np.testing.assert_allclose(img, expected, atol=1e-12)


def test_dc_at_grid_center():
    img = np.ones((8, 8))
    k = fft2c(ComplexGrid.from_real(img)).numpy()
    assert np.argmax(np.abs(k)) == 4 * 8 + 4
    assert k[4, 4] == pytest.approx(8.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 24), st.integers(0, 2**31 - 1))
def test_unitarity_and_roundtrip(n, seed):
    g = random_grid(np.random.default_rng(seed), n)
    k = fft2c(g)
    assert abs(float(k.norm()) - float(g.norm())) <= 1e-6 * float(g.norm())
    back = ifft2c(k)
    assert np.abs(back.numpy() - g.numpy()).max() <= 1e-6 * np.abs(g.numpy()).max()


def test_layout_and_shape_errors():
    g = ComplexGrid.from_real(np.zeros((8, 8)))
    with pytest.raises(ContractError):
        ifft2c(g)
    with pytest.raises(ContractError):
        fft2c(fft2c(g))
    with pytest.raises(DimensionError):
        ComplexGrid.from_real(np.zeros((8, 6)))
    with pytest.raises(DimensionError):
        ComplexGrid.from_real(np.zeros((0, 0)))
    with pytest.raises(DimensionError):
        ComplexGrid(torch.zeros(4, 4), torch.zeros(8, 8))


def test_undersample_identity_and_zero_masks():
    rng = np.random.default_rng(0)
    x = ComplexGrid.from_real(rng.random((8, 8)))
    full = undersample(x, torch.ones(8, 8))
    ref = fft2c(x)
    assert torch.equal(full.real, ref.real) and torch.equal(full.imag, ref.imag)
    none = undersample(x, torch.zeros(8, 8))
    assert none.abs().max() == 0


def test_dc_only_mask_recovers_mean():
    x = ComplexGrid.from_real(np.full((8, 8), 0.37))
    mask = torch.zeros(8, 8)
    mask[4, 4] = 1
    rec = zero_filled_recon(undersample(x, mask)).numpy()
    np.testing.assert_allclose(rec, 0.37, atol=1e-12)
    # non-constant image: DC-only reconstruction equals the image mean
    img = np.random.default_rng(1).random((8, 8))
    rec = zero_filled_recon(undersample(ComplexGrid.from_real(img), mask)).numpy()
    np.testing.assert_allclose(rec, img.mean(), atol=1e-12)


def test_undersample_errors():
    x = ComplexGrid.from_real(np.zeros((8, 8)))
    with pytest.raises(DimensionError):
        undersample(x, torch.ones(4, 4))
    with pytest.raises(ContractError):
        undersample(x, torch.full((8, 8), 1.5))
    with pytest.raises(ContractError):
        undersample(x, torch.full((8, 8), -0.1))


def test_mask_linearity():
    rng = np.random.default_rng(5)
    x = random_grid(rng, 8)
    m1 = torch.from_numpy(rng.random((8, 8)) * 0.5)
    m2 = torch.from_numpy(rng.random((8, 8)) * 0.5)
    a = undersample(x, m1 + m2)
    b1, b2 = undersample(x, m1), undersample(x, m2)
    np.testing.assert_allclose(a.numpy(), b1.numpy() + b2.numpy(), atol=1e-12)


def test_mask_broadcasts_over_batch():
    rng = np.random.default_rng(2)
    imgs = torch.from_numpy(rng.random((3, 8, 8)))
    mask = torch.from_numpy((rng.random((8, 8)) > 0.5).astype(float))
    batched = undersample(ComplexGrid.from_real(imgs), mask).numpy()
    for i in range(3):
        single = undersample(ComplexGrid.from_real(imgs[i]), mask).numpy()
        np.testing.assert_allclose(batched[i], single, atol=1e-12)


def central_difference_jvp(f, m, direction, h=1e-4):
    return (f(m + h * direction) - f(m - h * direction)) / (2 * h)


def test_undersample_mask_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = ComplexGrid.from_real(torch.from_numpy(rng.random((8, 8))))
    weights = torch.from_numpy(rng.standard_normal((8, 8)))
    weights_i = torch.from_numpy(rng.standard_normal((8, 8)))

    def scalar(mask):
        k = undersample(x, mask)
        return (weights * k.real + weights_i * k.imag).sum()

    m0 = torch.from_numpy(0.25 + 0.5 * rng.random((8, 8))).requires_grad_(True)
    scalar(m0).backward()
    for trial in range(5):
        v = torch.from_numpy(rng.standard_normal((8, 8)))
        v = 0.2 * v / v.abs().max()
        with torch.no_grad():
            fd = float(central_difference_jvp(scalar, m0.detach(), v))
        analytic = float((m0.grad * v).sum())
        assert abs(analytic - fd) <= 1e-3 * max(abs(fd), 1e-12)


def test_undersample_image_gradient_flows():
    x = torch.rand(8, 8, dtype=torch.float64, requires_grad=True)
    k = undersample(ComplexGrid.from_real(x), torch.full((8, 8), 0.5, dtype=torch.float64))
    (k.real**2 + k.imag**2).sum().backward()
    # Parseval: sum |0.5 F x|^2 = 0.25 |x|^2 -> gradient 0.5 x
    np.testing.assert_allclose(x.grad.numpy(), 0.5 * x.detach().numpy(), atol=1e-12)


def test_zero_filled_aliasing_lowers_psnr():
    from jointmri.data import generate_phantom
    from jointmri.metrics import psnr
    from jointmri.sampler import fixed_mask

    ph = generate_phantom(64, 64, 8, seed=4)
    x = ComplexGrid.from_real(ph.image)
    full = zero_filled_recon(undersample(x, torch.ones(64, 64))).abs().numpy()
    mask = fixed_mask("random", 64, 64, 0.10, seed=0).tensor(torch.float64)
    under = zero_filled_recon(undersample(x, mask)).abs().numpy()
    assert psnr(under, ph.image) < psnr(full, ph.image)
    assert psnr(full, ph.image) > 90
