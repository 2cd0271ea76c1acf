"""
Exact forward model for the 1D telegraph equation

    u_tt + b u_t - c**2 u_zz = 0,   0 < z < L,

driven at the surface z = 0 by the transducer displacement f(t) for
t <= T_ex (excitation phase, Dirichlet) and stress free afterwards (echo
phase, Neumann); the back wall z = L is stress free throughout.

Excitation phase: transfer function in the frequency domain,
    V(z, s) = F(s) * cosh((L - z) B) / cosh(L B),   B(s) = sqrt(-s**2 + i b s) / c,
evaluated in the overflow-free form e^{-zB}(1 + e^{-2(L-z)B}) / (1 + e^{-2LB}).
The discrete transform runs on the record grid along the shifted contour
s = tau - i*gamma, which damps the periodic wrap-around of the DFT by
e^{-gamma N dt} without padding (and keeps b = 0 regular).

Echo phase: reflection principle.  V(., T_ex) and V_t(., T_ex) are extended
evenly to [-L, L], expanded in a Fourier series and every mode evolves as
a_k(t) = A_k e^{lambda+ (t-T_ex)} + B_k e^{lambda- (t-T_ex)}.

Output: the surface signal g(t) = u(0, t) on the oscilloscope grid.
"""

import os
import sys
import time
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'Signal Source Codes'))
from signal_core import (AScan, ExcitationPulse, InvalidArgumentError,  # type: ignore
                         MaterialParams, NumericalFailureError, PlateModel, TimeGrid)

DEBUG = os.getenv('ASCAN_DEBUG', '0') == '1'

# Contour shift gamma = SHIFT_DECADES * ln(10) / record length
SHIFT_DECADES = float(os.getenv('ASCAN_SOLVER_SHIFT_DECADES', '8'))
REPEATED_ROOT_TOLERANCE = 1e-12
IMAGINARY_RESIDUE_TOLERANCE = 1e-10
# Rows per block in the power sums
POWER_BLOCK = 256


@dataclass(frozen=True, eq=False)
class SpectralField:
    z_grid: np.ndarray
    freq_grid: np.ndarray
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class EchoState:
    w0: np.ndarray
    w0_t: np.ndarray
    z_grid: np.ndarray
    t_ex: float
    imag_residue: float = 0.0


@dataclass(frozen=True, eq=False)
class ModeCoefficients:
    """Modes k = 0..K of the even extension; mode k stands for k and -k."""
    wavenumbers: np.ndarray
    multiplicity: np.ndarray
    lam_plus: np.ndarray
    lam_minus: np.ndarray
    A: np.ndarray
    B: np.ndarray
    repeated: np.ndarray
    t_ex: float


class SolverContext:
    """Per-thread cache of grid-only quantities (frequency grid, mode wavenumbers)."""

    def __init__(self):
        self._freqs: Dict[Tuple[int, float], np.ndarray] = {}
        self._modes: Dict[Tuple[int, float], np.ndarray] = {}
        self.solves = 0

    def angular_frequencies(self, grid: TimeGrid) -> np.ndarray:
        key = (grid.n_samples, grid.dt)
        if key not in self._freqs:
            self._freqs[key] = 2.0 * np.pi * np.fft.fftfreq(grid.n_samples, d=grid.dt)
        return self._freqs[key]

    def wavenumbers(self, plate: PlateModel) -> np.ndarray:
        key = (plate.n_cells, plate.length)
        if key not in self._modes:
            self._modes[key] = np.pi * np.arange(plate.n_cells + 1) / plate.length
        return self._modes[key]


def transfer_exponent(params: MaterialParams, tau):
    """
    B(tau) = sqrt(-tau**2 + i b tau) / c on the principal branch (Re B >= 0).

    tau may be complex (shifted contour).  On the branch cut (b = 0, real tau)
    the root is i*tau, i.e. the propagating solution.
    """
    s = np.asarray(tau, dtype=complex)
    arg = -s * s + 1j * params.b * s
    root = np.sqrt(arg)
    on_cut = (arg.imag == 0) & (arg.real < 0)
    if np.any(on_cut):
        root = np.where(on_cut, 1j * np.sign(s.real) * np.sqrt(np.abs(arg.real)), root)
    value = root / params.c
    return complex(value) if value.ndim == 0 else value


def _transfer_ratio(z: np.ndarray, B: np.ndarray, length: float) -> np.ndarray:
    """cosh((L-z)B)/cosh(LB) without forming e^{+LB}; shape (len(z), len(B))."""
    z = np.asarray(z, dtype=float)[:, None]
    return np.exp(-z * B) * (1.0 + np.exp(-2.0 * (length - z) * B)) / (1.0 + np.exp(-2.0 * length * B))


def _power_sums(weights: np.ndarray, ratio: np.ndarray, n_powers: int) -> np.ndarray:
    """S[m] = sum_j weights[j] * ratio[j]**m for m = 0..n_powers-1 (weights: (J, R))."""
    n_block = min(POWER_BLOCK, n_powers)
    base = np.empty((n_block, ratio.size), dtype=complex)
    base[0] = 1.0
    filled = 1
    while filled < n_block:
        take = min(filled, n_block - filled)
        base[filled:filled + take] = base[:take] * (base[filled - 1] * ratio)
        filled += take
    jump = base[n_block - 1] * ratio

    out = np.empty((n_powers, weights.shape[1]), dtype=complex)
    scaled = np.array(weights, dtype=complex, copy=True)
    for start in range(0, n_powers, n_block):
        stop = min(start + n_block, n_powers)
        out[start:stop] = base[:stop - start] @ scaled
        scaled *= jump[:, None]
    return out


def _shift_rate(grid: TimeGrid, decades: float) -> float:
    return decades * np.log(10.0) / grid.record_length


def spectral_field(params: MaterialParams, pulse: ExcitationPulse, plate: PlateModel,
                   z_values, context: Optional[SolverContext] = None) -> SpectralField:
    """V(z, tau) = F(tau) * transfer ratio on the real frequency grid (inspection only)."""
    context = context or SolverContext()
    tau = context.angular_frequencies(pulse.grid)
    F = np.fft.fft(pulse.samples)
    B = transfer_exponent(params, tau)
    z = np.atleast_1d(np.asarray(z_values, dtype=float))
    values = F[None, :] * _transfer_ratio(z, B, plate.length)
    return SpectralField(z_grid=z, freq_grid=tau, values=values)


def solve_excitation(params: MaterialParams, pulse: ExcitationPulse, plate: PlateModel,
                     context: Optional[SolverContext] = None,
                     shift_decades: float = SHIFT_DECADES) -> Tuple[np.ndarray, EchoState]:
    """
    Excitation phase.

    Returns:
        surface_v: V(0, t) on the pulse grid (= f(t) by the boundary condition)
        state: V and V_t at t_ex on the plate z-grid
    """
    context = context or SolverContext()
    grid = pulse.grid
    n = grid.n_samples
    t_ex = pulse.t_ex - grid.t0
    grid.index_of(pulse.t_ex)

    tau = context.angular_frequencies(grid)
    gamma = _shift_rate(grid, shift_decades)
    t = grid.dt * np.arange(n)
    spectrum = np.fft.fft(pulse.samples * np.exp(-gamma * t))
    if n % 2 == 0:
        spectrum[n // 2] = 0.0

    B = transfer_exponent(params, tau - 1j * gamma)
    # time-domain value at t_ex and its derivative (multiplication by i*s)
    coef = spectrum * np.exp(1j * tau * t_ex) / n
    denom = 1.0 + np.exp(-2.0 * plate.length * B)
    weights = np.stack([coef / denom, coef * (gamma + 1j * tau) / denom], axis=1)
    ratio = np.exp(-plate.dz * B)

    m = plate.n_cells
    sums = _power_sums(weights, ratio, 2 * m + 1)
    field = np.exp(gamma * t_ex) * (sums[:m + 1] + sums[2 * m::-1][:m + 1])
    if not np.all(np.isfinite(field)):
        raise NumericalFailureError(
            f"non-finite excitation field at b={params.b}, c={params.c} (shift {shift_decades} decades)")

    scale = max(1.0, float(np.abs(field.real).max()))
    residue = float(np.abs(field.imag).max()) / scale
    if DEBUG and residue > IMAGINARY_RESIDUE_TOLERANCE:
        print(f"⚠ excitation field imaginary residue {residue:.2e}")

    context.solves += 1
    state = EchoState(w0=field[:, 0].real.copy(), w0_t=field[:, 1].real.copy(),
                      z_grid=plate.z_grid(), t_ex=pulse.t_ex, imag_residue=residue)
    return np.array(pulse.samples, copy=True), state


def mode_coefficients(state: EchoState, params: MaterialParams, plate: PlateModel,
                      context: Optional[SolverContext] = None) -> ModeCoefficients:
    """Fourier modes of the even extension and their exponents / amplitudes."""
    context = context or SolverContext()
    m = plate.n_cells
    if state.w0.size != m + 1:
        raise InvalidArgumentError(f"echo state has {state.w0.size} depths, plate needs {m + 1}")

    def even_coefficients(values):
        extended = np.concatenate([values, values[-2:0:-1]])
        return np.fft.fft(extended).real[:m + 1] / (2 * m)

    a0 = even_coefficients(state.w0)
    a1 = even_coefficients(state.w0_t)

    b, c = params.b, params.c
    kappa = context.wavenumbers(plate)
    disc = (c * kappa) ** 2 - 0.25 * b * b
    root = np.sqrt(disc.astype(complex))
    lam_plus = -0.5 * b + 1j * root
    lam_minus = -0.5 * b - 1j * root
    lam_plus[0], lam_minus[0] = -b, 0.0
    repeated = np.abs(disc) < REPEATED_ROOT_TOLERANCE

    A = np.zeros(m + 1, dtype=complex)
    Bc = np.zeros(m + 1, dtype=complex)
    distinct = ~repeated
    Bc[distinct] = (lam_plus[distinct] * a0[distinct] - a1[distinct]) / (lam_plus[distinct] - lam_minus[distinct])
    A[distinct] = a0[distinct] - Bc[distinct]
    # repeated root: a(tau) = (A + B tau) e^{-b tau / 2}
    lam_plus[repeated] = lam_minus[repeated] = -0.5 * b
    A[repeated] = a0[repeated]
    Bc[repeated] = a1[repeated] + 0.5 * b * a0[repeated]

    multiplicity = np.full(m + 1, 2.0)
    multiplicity[0] = 1.0
    multiplicity[m] = 1.0
    return ModeCoefficients(wavenumbers=kappa, multiplicity=multiplicity, lam_plus=lam_plus,
                            lam_minus=lam_minus, A=A, B=Bc, repeated=repeated, t_ex=state.t_ex)


def evaluate_modes(modes: ModeCoefficients, tau0: float, dtau: float, n: int) -> np.ndarray:
    """Surface value W(0, T_ex + tau) at tau = tau0 + dtau * i, i = 0..n-1."""
    if n <= 0:
        return np.zeros(0)
    distinct = ~modes.repeated
    lam = np.concatenate([modes.lam_plus[distinct], modes.lam_minus[distinct]])
    amp = np.concatenate([modes.A[distinct], modes.B[distinct]])
    mult = np.concatenate([modes.multiplicity[distinct]] * 2)
    weights = (mult * amp * np.exp(lam * tau0))[:, None]
    values = _power_sums(weights, np.exp(lam * dtau), n)[:, 0]

    if np.any(modes.repeated):
        taus = tau0 + dtau * np.arange(n)
        rep = modes.repeated
        lam_r = modes.lam_plus[rep]
        values = values + ((modes.A[rep][None, :] + modes.B[rep][None, :] * taus[:, None])
                           * np.exp(np.outer(taus, lam_r))) @ modes.multiplicity[rep]
    return values.real


def echo_energy(modes: ModeCoefficients, params: MaterialParams, plate: PlateModel, taus) -> np.ndarray:
    """E(tau) = integral over [-L, L] of W_t**2 + c**2 W_z**2, by Parseval over the modes."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float))[:, None]
    ep = np.exp(modes.lam_plus[None, :] * taus)
    em = np.exp(modes.lam_minus[None, :] * taus)
    rep = modes.repeated[None, :]
    a = np.where(rep, (modes.A + modes.B * taus) * ep, modes.A * ep + modes.B * em)
    a_t = np.where(rep, modes.B * ep + modes.lam_plus * (modes.A + modes.B * taus) * ep,
                   modes.lam_plus * modes.A * ep + modes.lam_minus * modes.B * em)
    density = np.abs(a_t) ** 2 + (params.c * modes.wavenumbers) ** 2 * np.abs(a) ** 2
    return 2.0 * plate.length * density @ modes.multiplicity


def solve_echo(state: EchoState, params: MaterialParams, plate: PlateModel, t_ex: float,
               t_end: float, grid: TimeGrid, context: Optional[SolverContext] = None) -> np.ndarray:
    """w(0, t) for the grid times in (t_ex, t_end]."""
    if t_end <= t_ex:
        raise InvalidArgumentError(f"t_end={t_end} must exceed t_ex={t_ex}")
    times = grid.times()
    selected = np.flatnonzero((times > t_ex + 1e-9 * grid.dt) & (times <= t_end + 1e-9 * grid.dt))
    if selected.size == 0:
        return np.zeros(0)
    modes = mode_coefficients(state, params, plate, context)
    return evaluate_modes(modes, times[selected[0]] - t_ex, grid.dt, selected.size)


def forward_model(params: MaterialParams, pulse: ExcitationPulse, plate: PlateModel,
                  grid: Optional[TimeGrid] = None, context: Optional[SolverContext] = None,
                  location: Tuple[float, float] = (0.0, 0.0), index: Tuple[int, int] = (0, 0)) -> AScan:
    """Surface signal u(0, t): f(t) up to t_ex, free-surface echoes afterwards."""
    grid = grid or pulse.grid
    if grid != pulse.grid:
        raise InvalidArgumentError(f"output grid {grid} differs from pulse grid {pulse.grid}")
    start = time.perf_counter()
    context = context or SolverContext()

    surface_v, state = solve_excitation(params, pulse, plate, context)
    surface_w = solve_echo(state, params, plate, pulse.t_ex, grid.t_end, grid, context)
    samples = surface_v
    samples[grid.n_samples - surface_w.size:] = surface_w
    if not np.all(np.isfinite(samples)):
        raise NumericalFailureError(f"non-finite surface signal at b={params.b}, c={params.c}")

    if DEBUG:
        print(f"forward b={params.b:.4f} c={params.c:.4f}: {1e3 * (time.perf_counter() - start):.1f} ms")
    return AScan(grid=grid, samples=samples, location=location, index=index)
