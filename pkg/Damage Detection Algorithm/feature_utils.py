"""
Feature vector of a signal: phases and amplitudes of the three dominant DFT
bins of the first echo, and the error covariance estimated from an undamaged
reference region.
"""

import os
import sys
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'Signal Source Codes'))
from preprocess_utils import SMOOTHING_CUTOFF_MHZ  # type: ignore
from signal_core import (AScan, InsufficientDataError, InvalidArgumentError,  # type: ignore
                         ScanSet, TimeGrid)

DEBUG = os.getenv('ASCAN_DEBUG', '0') == '1'

ECHO_WINDOW_US = (11.8, 22.0)
N_BINS = 3
MIN_REFERENCE_LOCATIONS = 7
RIDGE_FACTOR = 1e-10
RIDGE_TRIGGER = 1e-12
# ridge used when the sample covariance vanishes entirely
RIDGE_FLOOR = 1e-10


@dataclass(frozen=True)
class EchoWindow:
    t_start: float = ECHO_WINDOW_US[0]
    t_end: float = ECHO_WINDOW_US[1]

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise InvalidArgumentError(f"echo window [{self.t_start}, {self.t_end}] is empty")

    def mask(self, grid: TimeGrid) -> np.ndarray:
        if self.t_end > grid.t0 + grid.record_length:
            raise InvalidArgumentError(f"echo window ends at {self.t_end} us, after the record")
        t = grid.times()
        return (t >= self.t_start) & (t <= self.t_end)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    phases: np.ndarray
    amplitudes: np.ndarray
    bin_indices: Tuple[int, ...]

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.phases, self.amplitudes])


@dataclass(frozen=True, eq=False)
class FeatureCovariance:
    sigma: np.ndarray
    mean: np.ndarray
    bin_indices: Tuple[int, ...]
    degenerate: bool = False
    ridge: float = 0.0
    n_locations: int = 0

    def __post_init__(self):
        try:
            factor = linalg.cho_factor(self.sigma, lower=True)
        except linalg.LinAlgError as e:
            raise InvalidArgumentError(f"feature covariance is not positive definite: {e}")
        object.__setattr__(self, '_factor', factor)

    def mahalanobis(self, residual: np.ndarray) -> float:
        """r^T Sigma^{-1} r."""
        return float(residual @ linalg.cho_solve(self._factor, residual))


def wrap_phase(phi):
    """Map angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(phi, dtype=float), 2.0 * np.pi)


def windowed_spectrum(scan: AScan, window: EchoWindow) -> np.ndarray:
    """One-sided DFT of the full-length record with everything outside the window zeroed."""
    samples = np.where(window.mask(scan.grid), scan.samples, 0.0)
    return np.fft.rfft(samples)


def select_dominant_bins(reference: ScanSet, window: EchoWindow = EchoWindow(),
                         cutoff: float = SMOOTHING_CUTOFF_MHZ) -> Tuple[int, ...]:
    """Three bins (above DC, below the smoothing cutoff) with the largest mean amplitude."""
    scans = reference.usable() if isinstance(reference, ScanSet) else list(reference)
    if not scans:
        raise InvalidArgumentError("reference set is empty")
    grid = scans[0].grid
    amplitude = np.mean([np.abs(windowed_spectrum(s, window)) for s in scans], axis=0)
    freqs = grid.frequencies_mhz()
    n = grid.n_samples
    candidates = [k for k in range(1, amplitude.size) if freqs[k] < cutoff and 2 * k < n]
    if len(candidates) < N_BINS:
        raise InvalidArgumentError(f"only {len(candidates)} bins below {cutoff} MHz")
    if max(amplitude[k] for k in candidates) == 0.0:
        raise InvalidArgumentError("reference spectrum is zero, no dominant bin")
    ranked = sorted(candidates, key=lambda k: (-amplitude[k], k))[:N_BINS]
    return tuple(sorted(int(k) for k in ranked))


def extract_features(scan: AScan, window: EchoWindow, bins: Sequence[int]) -> FeatureVector:
    """Magnitude and phase of the windowed record's DFT at the given bins."""
    bins = tuple(int(k) for k in bins)
    n = scan.grid.n_samples
    if any(k < 0 or 2 * k >= n for k in bins):
        raise InvalidArgumentError(f"bins {bins} must lie in [0, N/2) with N={n}")
    values = windowed_spectrum(scan, window)[list(bins)]
    amplitudes = np.abs(values)
    phases = np.where(amplitudes > 0, wrap_phase(np.angle(values)), 0.0)
    return FeatureVector(phases=phases, amplitudes=amplitudes, bin_indices=bins)


def feature_residual(model: FeatureVector, measured: FeatureVector) -> np.ndarray:
    """model - measured with the phase part wrapped to (-pi, pi]."""
    if model.bin_indices != measured.bin_indices:
        raise InvalidArgumentError(f"bin mismatch {model.bin_indices} vs {measured.bin_indices}")
    return np.concatenate([wrap_phase(model.phases - measured.phases),
                           model.amplitudes - measured.amplitudes])


def feature_matrix(scans, window: EchoWindow, bins: Sequence[int]) -> np.ndarray:
    """Rows (phi_1..phi_3, r_1..r_3), one per usable scan."""
    scans = scans.usable() if isinstance(scans, ScanSet) else list(scans)
    return np.array([extract_features(s, window, bins).as_array() for s in scans]).reshape(-1, 2 * N_BINS)


def covariance_from_matrix(features: np.ndarray, bins: Sequence[int]) -> FeatureCovariance:
    """
    Sample mean / covariance of feature rows.

    Phases use the circular mean and wrapped deviations.  A ridge
    1e-10 * trace / 6 is added when the smallest eigenvalue falls below
    1e-12 * trace (the result is then flagged degenerate).
    """
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    if n < MIN_REFERENCE_LOCATIONS:
        raise InsufficientDataError(
            f"{n} reference locations, at least {MIN_REFERENCE_LOCATIONS} needed for a 6x6 covariance")

    phases, amplitudes = features[:, :N_BINS], features[:, N_BINS:]
    resultant = np.exp(1j * phases).mean(axis=0)
    mean_phase = np.where(np.abs(resultant) > 0, np.angle(resultant), 0.0)
    deviations = np.hstack([wrap_phase(phases - mean_phase), amplitudes - amplitudes.mean(axis=0)])
    sigma = deviations.T @ deviations / (n - 1)
    sigma = 0.5 * (sigma + sigma.T)

    trace = float(np.trace(sigma))
    smallest = float(linalg.eigvalsh(sigma)[0])
    ridge = 0.0
    if trace <= 0.0:
        ridge = RIDGE_FLOOR
    elif smallest < RIDGE_TRIGGER * trace:
        ridge = RIDGE_FACTOR * trace / (2 * N_BINS)
    if ridge > 0.0:
        sigma = sigma + ridge * np.eye(2 * N_BINS)
        if DEBUG:
            print(f"⚠ feature covariance regularized with ridge {ridge:.3e}")

    mean = np.concatenate([wrap_phase(mean_phase), amplitudes.mean(axis=0)])
    return FeatureCovariance(sigma=sigma, mean=mean, bin_indices=tuple(int(k) for k in bins),
                             degenerate=ridge > 0.0, ridge=ridge, n_locations=n)


def estimate_covariance(reference: ScanSet, window: EchoWindow, bins: Sequence[int]) -> FeatureCovariance:
    """Feature covariance over the locations of an undamaged reference set."""
    scans = reference.usable() if isinstance(reference, ScanSet) else list(reference)
    if len(scans) < MIN_REFERENCE_LOCATIONS:
        raise InsufficientDataError(
            f"{len(scans)} reference locations, at least {MIN_REFERENCE_LOCATIONS} needed")
    return covariance_from_matrix(feature_matrix(scans, window, bins), bins)


def reference_subset(scans: ScanSet, mask: np.ndarray, label: Optional[str] = None) -> ScanSet:
    """The undamaged region of the plate under test, used as its own reference."""
    return scans.subset(mask, label=label or f"{scans.label} reference")
