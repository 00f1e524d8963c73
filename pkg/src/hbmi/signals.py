"""Time-series containers and EEG/EMG preprocessing.

All functions are pure: they never modify their inputs and return new
``Recording`` objects. Samples are stored channels x time.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from scipy import signal

from .errors import (
    InsufficientDurationError,
    InvalidFilterError,
    RateMismatchError,
)

Modality = Literal["EEG", "EMG"]

WINDOW_SECONDS = 0.25
BASELINE_SECONDS = 1.0
TRIAL_SECONDS = 5.0

# anti-alias lowpass used by downsample()
ANTIALIAS_ORDER = 8
ANTIALIAS_FRACTION = 0.4


@dataclass(frozen=True)
class Recording:
    samples: np.ndarray
    rate: float
    modality: Modality = "EEG"

    def __post_init__(self):
        samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if samples.ndim != 2:
            raise ValueError("samples must be a channels x time matrix")
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples contain non-finite values")
        object.__setattr__(self, "samples", samples)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.rate


@dataclass(frozen=True)
class Window:
    samples: np.ndarray
    trial_index: int = 0
    ordinal: int = 0


@dataclass(frozen=True)
class FilterSpec:
    """A bandpass (``band=(low, high)``) or notch (``center``) IIR filter."""

    kind: Literal["bandpass", "notch"]
    order: int = 4
    band: Optional[tuple[float, float]] = None
    center: Optional[float] = None
    q: float = 30.0

    def validate(self, rate: float) -> None:
        nyq = rate / 2.0
        if self.order < 1:
            raise InvalidFilterError(f"filter order must be >= 1, got {self.order}")
        if self.kind == "bandpass":
            if self.band is None:
                raise InvalidFilterError("bandpass filter needs a band")
            low, high = self.band
            if not 0 < low < high < nyq:
                raise InvalidFilterError(
                    f"band ({low}, {high}) Hz invalid for Nyquist {nyq} Hz")
        elif self.kind == "notch":
            if self.center is None or not 0 < self.center < nyq:
                raise InvalidFilterError(
                    f"notch center {self.center} Hz invalid for Nyquist {nyq} Hz")
        else:
            raise InvalidFilterError(f"unknown filter kind {self.kind!r}")


def bandpass(low: float, high: float, order: int = 4) -> FilterSpec:
    return FilterSpec("bandpass", order=order, band=(low, high))


def notch(center: float, q: float = 30.0) -> FilterSpec:
    return FilterSpec("notch", order=2, center=center, q=q)


def _as_sos(spec: FilterSpec, rate: float) -> np.ndarray:
    spec.validate(rate)
    if spec.kind == "bandpass":
        return signal.butter(spec.order, spec.band, btype="bandpass", fs=rate, output="sos")
    b, a = signal.iirnotch(spec.center, spec.q, fs=rate)
    return signal.tf2sos(b, a)


def apply_filter(rec: Recording, spec: FilterSpec) -> Recording:
    """Zero-phase (forward-backward) IIR filtering along time."""
    sos = _as_sos(spec, rec.rate)
    out = signal.sosfiltfilt(sos, rec.samples, axis=-1)
    return Recording(out, rec.rate, rec.modality)


def downsample(rec: Recording, target_rate: float) -> Recording:
    """Lowpass at 0.4 x target rate, then keep every k-th sample."""
    ratio = rec.rate / target_rate
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9:
        raise RateMismatchError(
            f"{rec.rate} Hz is not an integer multiple of {target_rate} Hz")
    if factor == 1:
        return rec
    sos = signal.butter(ANTIALIAS_ORDER, ANTIALIAS_FRACTION * target_rate,
                        btype="lowpass", fs=rec.rate, output="sos")
    smoothed = signal.sosfiltfilt(sos, rec.samples, axis=-1)
    n_out = rec.n_samples // factor
    return Recording(smoothed[:, : n_out * factor : factor], target_rate, rec.modality)


def trim_baseline(rec: Recording) -> Recording:
    """Keep the 1-5 s segment of a trial without any baseline subtraction."""
    start = int(round(BASELINE_SECONDS * rec.rate))
    stop = int(round(TRIAL_SECONDS * rec.rate))
    if rec.n_samples < stop:
        raise InsufficientDurationError(
            f"trial has {rec.n_samples} samples, need {stop} ({TRIAL_SECONDS} s at {rec.rate} Hz)")
    return Recording(rec.samples[:, start:stop], rec.rate, rec.modality)


def baseline_correct(rec: Recording) -> Recording:
    """Subtract the per-channel mean of the first second from the 1-5 s segment."""
    start = int(round(BASELINE_SECONDS * rec.rate))
    kept = trim_baseline(rec).samples
    baseline = rec.samples[:, :start].mean(axis=1, keepdims=True)
    return Recording(kept - baseline, rec.rate, rec.modality)


def window_length(rate: float) -> int:
    return int(round(WINDOW_SECONDS * rate))


def window_array(rec: Recording) -> tuple[np.ndarray, int]:
    """Contiguous 250 ms windows as an array (n_windows, channels, length).

    Returns the array and the number of trailing samples dropped.
    """
    length = window_length(rec.rate)
    n_windows = rec.n_samples // length
    dropped = rec.n_samples - n_windows * length
    used = rec.samples[:, : n_windows * length]
    arr = used.reshape(rec.n_channels, n_windows, length).transpose(1, 0, 2)
    return arr, dropped


def split_windows(rec: Recording, trial_index: int = 0) -> tuple[list[Window], int]:
    """Split into non-overlapping 250 ms windows.

    A trailing partial window is dropped; its sample count is returned
    alongside the windows so callers can report it.
    """
    arr, dropped = window_array(rec)
    windows = [Window(arr[k].copy(), trial_index, k) for k in range(arr.shape[0])]
    return windows, dropped


def window_rms(w: Window | np.ndarray) -> np.ndarray:
    x = w.samples if isinstance(w, Window) else np.asarray(w, dtype=float)
    if x.size == 0:
        raise ValueError("empty window")
    return np.sqrt(np.mean(np.square(x), axis=-1))
