"""Fourier amplitude features and the source-relative domain distance.

Images are stored channels-last (H x W x C). Spectra are center-shifted so
the zero-frequency bin sits at ``(H // 2, W // 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError, ParameterError


@dataclass(frozen=True)
class Image:
    """A real-valued raster with optional per-pixel class ids.

    ``domain_tag`` is carried for diagnostics only; no algorithm reads it.
    """

    pixels: np.ndarray
    labels: Optional[np.ndarray] = None
    domain_tag: Optional[str] = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise InvalidInputError(f"pixels must be H x W x C, got shape {px.shape}")
        if px.shape[0] < 2 or px.shape[1] < 2:
            raise InvalidInputError(f"image must be at least 2x2, got {px.shape[:2]}")
        if not np.all(np.isfinite(px)):
            raise InvalidInputError("pixel values must be finite")
        object.__setattr__(self, "pixels", px)
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != px.shape[:2]:
                raise InvalidInputError(
                    f"labels shape {lab.shape} does not match pixels {px.shape[:2]}")
            if lab.size and lab.min() < 0:
                raise InvalidInputError("labels must be non-negative")
            object.__setattr__(self, "labels", lab.astype(np.int64))

    @property
    def shape(self) -> tuple:
        return self.pixels.shape

    def without_labels(self) -> "Image":
        return Image(self.pixels, None, self.domain_tag)


@dataclass(frozen=True)
class AmplitudeCrop:
    values: np.ndarray
    beta: float


@dataclass(frozen=True)
class SourceAmplitudeProfile:
    mean_crop: np.ndarray
    n_source: int
    beta: float
    image_shape: tuple = field(default=())


def _as_image(image) -> Image:
    return image if isinstance(image, Image) else Image(np.asarray(image))


def fft2(image) -> np.ndarray:
    """Per-channel 2-D DFT with the zero frequency shifted to the center.

    Works for any H, W (numpy's pocketfft handles non power-of-two sizes).
    """
    px = _as_image(image).pixels
    return np.fft.fftshift(np.fft.fft2(px, axes=(0, 1)), axes=(0, 1))


def ifft2(spectrum: np.ndarray) -> np.ndarray:
    """Undo :func:`fft2`; returns the real part of the reconstruction."""
    unshifted = np.fft.ifftshift(spectrum, axes=(0, 1))
    return np.fft.ifft2(unshifted, axes=(0, 1)).real


def crop_size(height: int, width: int, beta: float) -> tuple[int, int]:
    _check_beta(beta)
    return max(1, int(np.floor(beta * height))), max(1, int(np.floor(beta * width)))


def _check_beta(beta: float) -> None:
    if not (0.0 < beta <= 1.0) or not np.isfinite(beta):
        raise ParameterError(f"beta must lie in (0, 1], got {beta}")


def amplitude_crop(spectrum: np.ndarray, beta: float) -> AmplitudeCrop:
    """Central low-frequency window of ``|spectrum|``.

    The window is ``max(1, floor(beta*H)) x max(1, floor(beta*W))`` and starts
    at ``H//2 - h_c//2``, so even-sized windows sit one bin toward lower indices.
    """
    _check_beta(beta)
    spectrum = np.asarray(spectrum)
    if spectrum.ndim == 2:
        spectrum = spectrum[:, :, None]
    h, w = spectrum.shape[:2]
    hc, wc = crop_size(h, w, beta)
    r0 = h // 2 - hc // 2
    c0 = w // 2 - wc // 2
    window = spectrum[r0:r0 + hc, c0:c0 + wc]
    return AmplitudeCrop(np.abs(window).astype(np.float64), float(beta))


def image_crop(image, beta: float) -> AmplitudeCrop:
    return amplitude_crop(fft2(image), beta)


def source_profile(images: Sequence, beta: float) -> SourceAmplitudeProfile:
    """Elementwise mean of the amplitude crops of ``images``."""
    _check_beta(beta)
    images = [_as_image(im) for im in images]
    if not images:
        raise ParameterError("source_profile needs at least one image")
    shape = images[0].shape
    total = None
    for im in images:
        if im.shape != shape:
            raise InvalidInputError(
                f"all source images must share a shape; got {im.shape} vs {shape}")
        crop = image_crop(im, beta).values
        total = crop.copy() if total is None else total + crop
    return SourceAmplitudeProfile(total / len(images), len(images), float(beta), tuple(shape))


def domain_distance(image, profile: SourceAmplitudeProfile) -> float:
    """Mean squared difference between the image crop and the source profile."""
    im = _as_image(image)
    if profile.image_shape and im.shape != profile.image_shape:
        raise InvalidInputError(
            f"image shape {im.shape} incompatible with profile built on {profile.image_shape}")
    crop = image_crop(im, profile.beta).values
    if crop.shape != profile.mean_crop.shape:
        raise InvalidInputError(
            f"crop shape {crop.shape} != profile shape {profile.mean_crop.shape}")
    return float(np.mean((profile.mean_crop - crop) ** 2))


def resize_bilinear(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resample of an H x W x C array to ``height x width``."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 2:
        px = px[:, :, None]
    if px.shape[:2] == (height, width):
        return px.copy()
    zoom = (height / px.shape[0], width / px.shape[1], 1.0)
    out = ndimage.zoom(px, zoom, order=1, mode="nearest", grid_mode=True)
    return np.clip(out[:height, :width], 0.0, 1.0)
