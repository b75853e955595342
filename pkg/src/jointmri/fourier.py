"""Centered orthonormal 2D Fourier operators and the masked undersampling model.

All grids are square. Leading batch dimensions are allowed; the transform acts
on the last two axes. k-space is stored centered, i.e. the zero-frequency
coefficient sits at index ``(H // 2, W // 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from jointmri.errors import ContractError, DimensionError

IMAGE = "image"
KSPACE = "kspace"


@dataclass
class ComplexGrid:
    """Complex 2D data held as separate real and imaginary planes.

    ``layout`` is ``"image"`` for image-domain data and ``"kspace"`` for
    centered k-space.
    """

    real: torch.Tensor
    imag: torch.Tensor
    layout: str = IMAGE

    def __post_init__(self):
        if self.layout not in (IMAGE, KSPACE):
            raise ContractError(f"unknown layout {self.layout!r}")
        if self.real.shape != self.imag.shape:
            raise DimensionError(
                f"real/imag shape mismatch: {tuple(self.real.shape)} vs {tuple(self.imag.shape)}"
            )
        _check_square(self.real)

    @classmethod
    def from_real(cls, image, layout: str = IMAGE) -> "ComplexGrid":
        """Wrap a real-valued array (numpy or torch) with a zero imaginary plane."""
        real = torch.as_tensor(image)
        if not torch.is_floating_point(real):
            real = real.to(torch.get_default_dtype())
        return cls(real, torch.zeros_like(real), layout)

    @classmethod
    def from_complex(cls, z: torch.Tensor, layout: str) -> "ComplexGrid":
        return cls(z.real.contiguous(), z.imag.contiguous(), layout)

    def to_complex(self) -> torch.Tensor:
        return torch.complex(self.real, self.imag)

    def abs(self) -> torch.Tensor:
        return torch.sqrt(self.real**2 + self.imag**2)

    def norm(self) -> torch.Tensor:
        """Euclidean norm over every entry (all batch items together)."""
        return torch.sqrt((self.real**2 + self.imag**2).sum())

    def channels(self) -> torch.Tensor:
        """Stack as a 2-channel tensor ``(..., 2, H, W)`` for network input."""
        return torch.stack([self.real, self.imag], dim=-3)

    @property
    def shape(self):
        return tuple(self.real.shape)

    def numpy(self) -> np.ndarray:
        return self.to_complex().detach().cpu().numpy()


def _check_square(t: torch.Tensor) -> None:
    if t.ndim < 2:
        raise DimensionError(f"expected at least 2 dimensions, got shape {tuple(t.shape)}")
    h, w = t.shape[-2:]
    if h == 0 or w == 0:
        raise DimensionError("empty grid")
    if h != w:
        raise DimensionError(f"grid must be square, got {h}x{w}")


def _require_layout(grid: ComplexGrid, layout: str) -> None:
    if grid.layout != layout:
        raise ContractError(f"expected {layout!r} layout, got {grid.layout!r}")


def fft2c(img: ComplexGrid) -> ComplexGrid:
    """Unitary 2D DFT of an image-domain grid, returned as centered k-space."""
    _require_layout(img, IMAGE)
    z = torch.fft.ifftshift(img.to_complex(), dim=(-2, -1))
    k = torch.fft.fftshift(torch.fft.fft2(z, norm="ortho"), dim=(-2, -1))
    return ComplexGrid.from_complex(k, KSPACE)


def ifft2c(ksp: ComplexGrid) -> ComplexGrid:
    """Exact inverse of :func:`fft2c`."""
    _require_layout(ksp, KSPACE)
    k = torch.fft.ifftshift(ksp.to_complex(), dim=(-2, -1))
    z = torch.fft.fftshift(torch.fft.ifft2(k, norm="ortho"), dim=(-2, -1))
    return ComplexGrid.from_complex(z, IMAGE)


def apply_mask(ksp: ComplexGrid, mask) -> ComplexGrid:
    """Hadamard product of centered k-space with a real mask in [0, 1].

    The mask broadcasts over leading batch dimensions.
    """
    _require_layout(ksp, KSPACE)
    mask = torch.as_tensor(mask)
    if mask.shape[-2:] != ksp.real.shape[-2:]:
        raise DimensionError(
            f"mask shape {tuple(mask.shape)} does not match grid {ksp.shape}"
        )
    with torch.no_grad():
        if bool((mask < 0).any()) or bool((mask > 1).any()):
            raise ContractError("mask entries must lie in [0, 1]")
    mask = mask.to(ksp.real.dtype)
    return ComplexGrid(ksp.real * mask, ksp.imag * mask, KSPACE)


def undersample(x: ComplexGrid, mask) -> ComplexGrid:
    """Masked k-space ``mask * fft2c(x)``; differentiable in both ``x`` and ``mask``."""
    _require_layout(x, IMAGE)
    mask = torch.as_tensor(mask)
    if mask.shape[-2:] != x.real.shape[-2:]:
        raise DimensionError(f"mask shape {tuple(mask.shape)} does not match image {x.shape}")
    return apply_mask(fft2c(x), mask)


def zero_filled_recon(ksp: ComplexGrid) -> ComplexGrid:
    """Inverse transform of undersampled k-space (missing entries are zero)."""
    return ifft2c(ksp)
