"""Time-frequency front end: radix-2 FFT, STFT, and magnitude/phase maps.

The full-scale configuration maps a 1024-sample complex frame through a
128-point sliding FFT (hop 1, centered zero padding) to a 65x1025 map, which
is split into magnitude and phase planes for the 2-D convolution branches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _bit_reverse_indices(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def fft(x):
    """Radix-2 iterative FFT along the last axis.

    Forward convention X[k] = sum_n x[n] exp(-2j*pi*k*n/N), no normalization.
    Length must be a power of two.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n == 0 or (n & (n - 1)) != 0:
        raise ValueError(f"fft length must be a power of two, got {n}")
    out = x[..., _bit_reverse_indices(n)].copy()
    m = 2
    while m <= n:
        half = m // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / m)
        view = out.reshape(x.shape[:-1] + (n // m, m))
        even = view[..., :half]
        odd = view[..., half:] * twiddle
        view[..., :half], view[..., half:] = even + odd, even - odd
        m *= 2
    return out


def ifft(x):
    """Inverse of fft (1/N normalized); used by round-trip tests only."""
    x = np.asarray(x, dtype=np.complex128)
    return np.conj(fft(np.conj(x))) / x.shape[-1]


def window_values(name, win):
    if name == "rectangular":
        return np.ones(win)
    if name == "hann":
        # Periodic Hann, the usual STFT analysis window.
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    raise ValueError(f"unknown window {name!r}")


def stft_shape(n_samples, win, hop, centered=True):
    """(bins, frames) the transform will produce, without computing it."""
    padded = n_samples + 2 * (win // 2) if centered else n_samples
    if win > padded:
        raise ValueError(f"window {win} longer than padded signal {padded}")
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    return win // 2 + 1, (padded - win) // hop + 1


def stft(frame, win=128, hop=1, window="rectangular", centered=True):
    """One-sided STFT of a complex frame; returns complex [bins, frames].

    `centered` zero-pads win//2 samples on each side, so a 1024-sample frame
    with win=128 and hop=1 yields the (65, 1025) map used by the network.
    """
    frame = np.asarray(frame, dtype=np.complex128)
    if frame.ndim != 1:
        raise ValueError(f"stft expects a 1-D frame, got shape {frame.shape}")
    bins, n_frames = stft_shape(frame.size, win, hop, centered)
    pad = win // 2 if centered else 0
    padded = np.pad(frame, (pad, pad)) if pad else frame
    segments = np.lib.stride_tricks.sliding_window_view(padded, win)[::hop]
    spectra = fft(segments * window_values(window, win))
    return spectra[:, :bins].T.copy()


def split_mag_phase(z):
    """Magnitude |z| and wrapped phase atan2(Im, Re); zero cells get phase 0."""
    mag = np.abs(z)
    phase = np.where(mag == 0.0, 0.0, np.arctan2(z.imag, z.real))
    return mag, phase


@dataclass
class TFMap:
    """Magnitude and phase planes of one frame's STFT."""

    magnitude: np.ndarray
    phase: np.ndarray

    @property
    def bins(self):
        return self.magnitude.shape[0]

    @property
    def frames(self):
        return self.magnitude.shape[1]

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape:
            raise ValueError(
                f"magnitude/phase shapes differ: {self.magnitude.shape} vs {self.phase.shape}"
            )
        if np.any(self.magnitude < 0):
            raise ValueError("negative magnitude")


def tf_map(frame, win=128, hop=1, window="rectangular", centered=True):
    """STFT a frame and split into a TFMap."""
    mag, phase = split_mag_phase(stft(frame, win=win, hop=hop, window=window, centered=centered))
    return TFMap(magnitude=mag, phase=phase)
