"""Image-space <-> k-space conversions and polar accessors.

k-space is the 2D spatial-frequency domain of an MR slice. The forward
transform here is the plain (unnormalized) 2D discrete Fourier transform

    F(u, v) = sum_{x, y} f(x, y) * exp(-i 2 pi (u x / M + v y / N)),

so the inverse carries the 1/(M N) factor. The amplitude sqrt(a^2 + b^2)
of a coefficient measures how strongly that 2D wave contributes; the phase
is its peak-shift angle, computed with the two-argument arctangent so the
full quadrant is resolved and phase(0, 0) is defined as 0.

DC-centering (zero frequency moved to the array center) is provided only
as a visualization utility; losses and training never depend on coefficient
ordering.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass
class KSpaceImage:
    """Complex frequency-domain coefficients of one slice.

    values: complex M x N matrix, same shape as the source image.
    dc_centered: whether the zero-frequency term sits at the array center
        (raw transform ordering puts it at [0, 0]).
    """

    values: np.ndarray
    dc_centered: bool = False

    @property
    def shape(self):
        return self.values.shape


def forward_kspace(image) -> KSpaceImage:
    """Transform a real M x N image into k-space (unnormalized 2D DFT)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"expected a 2D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("image contains non-finite values")
    return KSpaceImage(values=np.fft.fft2(arr), dc_centered=False)


def inverse_kspace(k: KSpaceImage) -> np.ndarray:
    """Real part of the inverse transform (carries the 1/(M N) factor)."""
    values = k.values
    if k.dc_centered:
        values = np.fft.ifftshift(values)
    return np.fft.ifft2(values).real


def amplitude(k: KSpaceImage) -> np.ndarray:
    """Elementwise amplitude sqrt(a^2 + b^2) of the spectrum."""
    return np.abs(k.values)


def phase(k: KSpaceImage) -> np.ndarray:
    """Elementwise phase in (-pi, pi]; phase at a zero coefficient is 0."""
    return np.arctan2(k.values.imag, k.values.real)


def center_dc(k: KSpaceImage) -> KSpaceImage:
    """Shift the zero-frequency term to the array center (visualization only)."""
    if k.dc_centered:
        return KSpaceImage(values=k.values.copy(), dc_centered=True)
    return KSpaceImage(values=np.fft.fftshift(k.values), dc_centered=True)


def uncenter_dc(k: KSpaceImage) -> KSpaceImage:
    """Undo :func:`center_dc`, restoring raw transform ordering."""
    if not k.dc_centered:
        return KSpaceImage(values=k.values.copy(), dc_centered=False)
    return KSpaceImage(values=np.fft.ifftshift(k.values), dc_centered=False)


def log_amplitude_panel(image) -> np.ndarray:
    """8-bit log-amplitude rendering of an image's spectrum, DC centered.

    Used by the rating service to serve k-space panels; never used in
    training or scoring.
    """
    amp = amplitude(center_dc(forward_kspace(image)))
    panel = np.log1p(amp)
    top = panel.max()
    if top > 0:
        panel = panel / top
    return np.round(panel * 255.0).astype(np.uint8)
