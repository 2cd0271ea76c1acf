"""
Posterior inference of (b, c) for one location.

Gaussian likelihood in feature space, uniform prior on a closed box, and a
random-walk Metropolis chain with a two-stage proposal width.  Summaries are
the sample mean / covariance and a box-renormalized Gaussian product KDE.
"""

import os
import sys
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import norm

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'Signal Source Codes'))
import grid_workers  # type: ignore
from preprocess_utils import SmoothingOptions, excitation_from_scan  # type: ignore
from scanset_io import ChainRecord, MapLayer  # type: ignore
from signal_core import (AScan, ExcitationPulse, InsufficientDataError,  # type: ignore
                         InvalidArgumentError, MaterialParams, NumericalFailureError,
                         PlateModel, ScanSet, cell_values)

from feature_utils import EchoWindow, FeatureCovariance, FeatureVector, extract_features, feature_residual
from telegraph_solver import SolverContext, forward_model

DEBUG = os.getenv('ASCAN_DEBUG', '0') == '1'

BURN_IN = 100
CHAIN_LENGTH = 1000
MIN_SUMMARY_SAMPLES = 10
MIN_REGION_SAMPLES = 100
ACCEPTANCE_LOW = 0.02
ACCEPTANCE_HIGH = 0.90
SILVERMAN_FACTOR = 1.06
# bandwidth floor as a fraction of the box width
BANDWIDTH_FLOOR = 1e-3
KDE_CHUNK = 2048

ModelFeatures = Callable[[MaterialParams], FeatureVector]
LogTarget = Callable[[float, float], float]


@dataclass(frozen=True)
class PriorBox:
    b_min: float = 0.05
    b_max: float = 0.6
    c_min: float = 0.2
    c_max: float = 0.25

    def __post_init__(self):
        if not (self.b_min < self.b_max and self.c_min < self.c_max):
            raise InvalidArgumentError(f"empty prior box {self.as_tuple()}")
        if self.b_min < 0 or self.c_min <= 0:
            raise InvalidArgumentError(f"prior box must satisfy b >= 0, c > 0, got {self.as_tuple()}")

    def contains(self, b, c):
        """Closed box test; works elementwise on arrays."""
        inside = (b >= self.b_min) & (b <= self.b_max) & (c >= self.c_min) & (c <= self.c_max)
        return bool(inside) if np.ndim(inside) == 0 else inside

    @property
    def midpoint(self) -> Tuple[float, float]:
        return (0.5 * (self.b_min + self.b_max), 0.5 * (self.c_min + self.c_max))

    @property
    def ranges(self) -> np.ndarray:
        return np.array([self.b_max - self.b_min, self.c_max - self.c_min])

    @property
    def area(self) -> float:
        return float(np.prod(self.ranges))

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.b_min, self.b_max, self.c_min, self.c_max)


@dataclass(frozen=True)
class ProposalSchedule:
    eps_early: float = 0.02
    eps_late: float = 0.001
    switch_step: int = 100

    def __post_init__(self):
        if self.eps_early <= 0 or self.eps_late <= 0:
            raise InvalidArgumentError("proposal scales must be > 0")
        if self.switch_step < 0:
            raise InvalidArgumentError("switch step must be >= 0")

    def epsilon(self, step: int) -> float:
        return self.eps_early if step < self.switch_step else self.eps_late

    def proposal_std(self, step: int, prior: PriorBox) -> np.ndarray:
        """Per-axis standard deviation; the proposal covariance is eps * diag(box ranges)."""
        return np.sqrt(self.epsilon(step) * prior.ranges)


@dataclass(frozen=True)
class McmcOptions:
    burn_in: int = BURN_IN
    n: int = CHAIN_LENGTH
    schedule: ProposalSchedule = field(default_factory=ProposalSchedule)
    root_seed: int = 0
    workers: Optional[int] = None
    cache: bool = True


@dataclass(frozen=True, eq=False)
class PosteriorChain:
    samples: np.ndarray          # (n, 2) columns b, c; post burn-in
    log_posterior: np.ndarray    # (n,)
    accepted: int
    burn_in: int
    seed: Union[int, Tuple[int, ...], None]
    prior: PriorBox = field(default_factory=PriorBox)
    schedule: ProposalSchedule = field(default_factory=ProposalSchedule)
    evaluations: int = 0
    diagnostics: Tuple[str, ...] = ()

    def __post_init__(self):
        samples = np.array(self.samples, dtype=float).reshape(-1, 2)
        samples.setflags(write=False)
        object.__setattr__(self, 'samples', samples)
        if not 0 <= self.accepted <= self.burn_in + len(samples):
            raise InvalidArgumentError(f"accepted={self.accepted} exceeds {self.burn_in + len(samples)} steps")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def b(self) -> np.ndarray:
        return self.samples[:, 0]

    @property
    def c(self) -> np.ndarray:
        return self.samples[:, 1]

    @property
    def acceptance_rate(self) -> float:
        steps = self.burn_in + self.n
        return self.accepted / steps if steps else 0.0

    @property
    def unreliable(self) -> bool:
        return bool(self.diagnostics)

    @classmethod
    def from_record(cls, record: ChainRecord) -> 'PosteriorChain':
        """Rebuild a chain read back by scanset_io."""
        return cls(samples=record.samples, log_posterior=record.log_posterior, accepted=record.accepted,
                   burn_in=record.burn_in, seed=record.seed, prior=PriorBox(*record.box),
                   schedule=ProposalSchedule(*record.schedule), diagnostics=tuple(record.diagnostics))


@dataclass(frozen=True)
class RegionProbability:
    probability: float
    standard_error: float
    n: int


def _pair(params) -> Tuple[float, float]:
    if isinstance(params, MaterialParams):
        return params.b, params.c
    b, c = params
    return float(b), float(c)


def make_model_features(pulse: ExcitationPulse, plate: PlateModel, window: EchoWindow,
                        bins: Sequence[int]) -> ModelFeatures:
    """M(beta): features of the simulated signal; holds its own solver context (one per chain)."""
    context = SolverContext()

    def model(params: MaterialParams) -> FeatureVector:
        return extract_features(forward_model(params, pulse, plate, pulse.grid, context), window, bins)
    return model


def log_likelihood(params, alpha_meas: FeatureVector, cov: FeatureCovariance,
                   model_features: ModelFeatures) -> float:
    """-(M(beta) - alpha)^T Sigma^-1 (M(beta) - alpha) / 2, constant dropped."""
    b, c = _pair(params)
    try:
        model = model_features(MaterialParams(b, c))
    except NumericalFailureError:
        return -np.inf
    residual = feature_residual(model, alpha_meas)
    return -0.5 * cov.mahalanobis(residual)


def log_posterior(params, alpha_meas: FeatureVector, cov: FeatureCovariance, prior: PriorBox,
                  model_features: ModelFeatures) -> float:
    b, c = _pair(params)
    if not prior.contains(b, c):
        return -np.inf
    return log_likelihood((b, c), alpha_meas, cov, model_features)


def acceptance_probability(log_p_current: float, log_p_proposed: float,
                           log_q_forward: float = 0.0, log_q_backward: float = 0.0) -> float:
    """
    min(1, p(y) q(x|y) / (p(x) q(y|x))) in log space.

    log_q_forward is log q(y|x), log_q_backward is log q(x|y).
    """
    if log_p_proposed == -np.inf:
        return 0.0
    if log_p_current == -np.inf:
        return 1.0
    log_ratio = log_p_proposed - log_p_current + log_q_backward - log_q_forward
    return 1.0 if log_ratio >= 0 else float(np.exp(log_ratio))


def _gaussian_log_q(to: np.ndarray, frm: np.ndarray, std: np.ndarray) -> float:
    return float(np.sum(norm.logpdf(to, loc=frm, scale=std)))


def run_chain(alpha_meas: Optional[FeatureVector], cov: Optional[FeatureCovariance],
              prior: PriorBox = PriorBox(), schedule: ProposalSchedule = ProposalSchedule(),
              burn_in: int = BURN_IN, n: int = CHAIN_LENGTH, seed=0,
              model_features: Optional[ModelFeatures] = None, log_target: Optional[LogTarget] = None,
              cache: bool = True, hastings: bool = False) -> PosteriorChain:
    """
    Random-walk Metropolis chain on the prior box.

    Starts at the box midpoint; the first `burn_in` states are dropped and `n`
    are returned.  `log_target(b, c)` replaces the feature likelihood (the box
    indicator is applied either way).  With cache=False the current state's
    posterior is recomputed each step; results are identical.
    """
    if burn_in < 0 or n < 1:
        raise InvalidArgumentError(f"need burn_in >= 0 and n >= 1, got {burn_in}, {n}")
    if log_target is None:
        if model_features is None or alpha_meas is None or cov is None:
            raise InvalidArgumentError("either log_target or (alpha_meas, cov, model_features) is required")

        def log_target(b: float, c: float) -> float:
            return log_likelihood((b, c), alpha_meas, cov, model_features)

    evaluations = 0

    def evaluate(b: float, c: float) -> float:
        nonlocal evaluations
        if not prior.contains(b, c):
            return -np.inf
        evaluations += 1
        value = float(log_target(b, c))
        return -np.inf if np.isnan(value) else value

    rng = np.random.default_rng(seed)
    current = np.array(prior.midpoint, dtype=float)
    current_lp = evaluate(*current)
    samples = np.empty((n, 2))
    log_posts = np.empty(n)
    accepted = 0

    for step in range(1, burn_in + n + 1):
        std = schedule.proposal_std(step, prior)
        proposal = current + std * rng.standard_normal(2)
        u = rng.random()
        if not cache:
            current_lp = evaluate(*current)
        proposal_lp = evaluate(float(proposal[0]), float(proposal[1]))
        log_q_forward = log_q_backward = 0.0
        if hastings:
            log_q_forward = _gaussian_log_q(proposal, current, std)
            log_q_backward = _gaussian_log_q(current, proposal, std)
        if u < acceptance_probability(current_lp, proposal_lp, log_q_forward, log_q_backward):
            current, current_lp = proposal, proposal_lp
            accepted += 1
        if step > burn_in:
            samples[step - burn_in - 1] = current
            log_posts[step - burn_in - 1] = current_lp

    rate = accepted / (burn_in + n)
    diagnostics = []
    if rate < ACCEPTANCE_LOW:
        diagnostics.append(f"acceptance rate {rate:.3f} below {ACCEPTANCE_LOW}")
    elif rate > ACCEPTANCE_HIGH:
        diagnostics.append(f"acceptance rate {rate:.3f} above {ACCEPTANCE_HIGH}")
    if DEBUG:
        for d in diagnostics:
            print(f"⚠ chain seed={seed}: {d}")

    seed_record = seed_to_record(seed)
    return PosteriorChain(samples=samples, log_posterior=log_posts, accepted=accepted, burn_in=burn_in,
                          seed=seed_record, prior=prior, schedule=schedule, evaluations=evaluations,
                          diagnostics=tuple(diagnostics))


def location_seed(root_seed: int, index: Tuple[int, int]) -> np.random.SeedSequence:
    """Independent RNG stream of one grid cell; shared by posterior maps and the damage test."""
    return np.random.SeedSequence(int(root_seed), spawn_key=tuple(int(i) for i in index))


def seed_to_record(seed) -> Union[int, Tuple[int, ...], None]:
    """Plain-int form of a seed: an int stays, a SeedSequence becomes (entropy, *spawn_key)."""
    if isinstance(seed, np.random.SeedSequence):
        return (int(seed.entropy),) + tuple(int(k) for k in seed.spawn_key)
    return seed


def seed_from_record(record) -> Union[int, np.random.SeedSequence, None]:
    if isinstance(record, (tuple, list)):
        return np.random.SeedSequence(int(record[0]), spawn_key=tuple(int(k) for k in record[1:]))
    return record


def split_rhat(chains) -> float:
    """Split-chain potential scale reduction of one scalar quantity; chains is (m, n)."""
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[1] < 4:
        raise InvalidArgumentError(f"need (m, n) chains with n >= 4, got shape {chains.shape}")
    half = chains.shape[1] // 2
    halves = np.vstack([chains[:, :half], chains[:, -half:]])
    within = halves.var(axis=1, ddof=1).mean()
    between = half * halves.mean(axis=1).var(ddof=1)
    if within == 0:
        return 1.0 if between == 0 else np.inf
    var_hat = (half - 1) / half * within + between / half
    return float(np.sqrt(var_hat / within))


def effective_sample_size(x) -> float:
    """Batch-means estimate with sqrt(n) batches."""
    x = np.asarray(x, dtype=float)
    n = x.size
    size = int(np.sqrt(n))
    if size < 2:
        raise InsufficientDataError(f"{n} samples are too few for batch means")
    n_batches = n // size
    batch_means = x[:n_batches * size].reshape(n_batches, size).mean(axis=1)
    var = x.var(ddof=1)
    batch_var = batch_means.var(ddof=1)
    if var == 0 or batch_var == 0:
        return float(n)
    return float(min(n, n * var / (size * batch_var)))


class BoxKde:
    """
    Product Gaussian KDE truncated to the prior box.

    Every kernel is renormalized by its own mass inside the box, so the
    density integrates to one over the box and vanishes outside.
    """

    def __init__(self, samples: np.ndarray, bandwidth: np.ndarray, prior: PriorBox):
        self.samples = np.asarray(samples, dtype=float).reshape(-1, 2)
        self.bandwidth = np.asarray(bandwidth, dtype=float)
        self.prior = prior
        lower = np.array([prior.b_min, prior.c_min])
        upper = np.array([prior.b_max, prior.c_max])
        mass = (norm.cdf((upper - self.samples) / self.bandwidth)
                - norm.cdf((lower - self.samples) / self.bandwidth))
        self._mass = mass

    def _axis_kernels(self, values: np.ndarray, axis: int, low: float, high: float) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        h = self.bandwidth[axis]
        k = norm.pdf((values[:, None] - self.samples[None, :, axis]) / h) / (h * self._mass[None, :, axis])
        k[(values < low) | (values > high)] = 0.0
        return k

    def density(self, b, c) -> np.ndarray:
        b, c = np.broadcast_arrays(np.asarray(b, dtype=float), np.asarray(c, dtype=float))
        flat_b, flat_c = b.ravel(), c.ravel()
        out = np.empty(flat_b.size)
        p = self.prior
        for start in range(0, flat_b.size, KDE_CHUNK):
            sl = slice(start, start + KDE_CHUNK)
            kb = self._axis_kernels(flat_b[sl], 0, p.b_min, p.b_max)
            kc = self._axis_kernels(flat_c[sl], 1, p.c_min, p.c_max)
            out[sl] = np.mean(kb * kc, axis=1)
        return out.reshape(b.shape)

    def grid(self, b_axis: np.ndarray, c_axis: np.ndarray) -> np.ndarray:
        """Density on the tensor grid, shape (len(b_axis), len(c_axis))."""
        p = self.prior
        kb = self._axis_kernels(b_axis, 0, p.b_min, p.b_max)
        kc = self._axis_kernels(c_axis, 1, p.c_min, p.c_max)
        return kb @ kc.T / self.samples.shape[0]


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    mean: MaterialParams
    covariance: np.ndarray
    kde: BoxKde
    degenerate: bool
    n: int
    prior: PriorBox = field(default_factory=PriorBox)

    @property
    def bandwidth(self) -> np.ndarray:
        return self.kde.bandwidth

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def kde_grid(self, nb: int = 101, nc: int = 101):
        """(b_axis, c_axis, density) with density[i, j] at (b_axis[i], c_axis[j])."""
        p = self.prior
        b_axis = np.linspace(p.b_min, p.b_max, nb)
        c_axis = np.linspace(p.c_min, p.c_max, nc)
        return b_axis, c_axis, self.kde.grid(b_axis, c_axis)

    def sample_densities(self) -> np.ndarray:
        cached = self.__dict__.get('_sample_densities')
        if cached is None:
            cached = self.kde.density(self.kde.samples[:, 0], self.kde.samples[:, 1])
            object.__setattr__(self, '_sample_densities', cached)
        return cached


def posterior_summary(chain: PosteriorChain, prior: Optional[PriorBox] = None) -> PosteriorSummary:
    """Sample mean / covariance and a Silverman-bandwidth KDE on the box."""
    prior = prior or chain.prior
    n = chain.n
    if n < MIN_SUMMARY_SAMPLES:
        raise InsufficientDataError(f"{n} samples, at least {MIN_SUMMARY_SAMPLES} needed for a summary")
    samples = chain.samples
    mean = samples.mean(axis=0)
    covariance = np.cov(samples, rowvar=False)
    sigma = samples.std(axis=0, ddof=1)
    degenerate = bool(np.any(sigma == 0))
    bandwidth = np.maximum(SILVERMAN_FACTOR * sigma * n ** (-0.2), BANDWIDTH_FLOOR * prior.ranges)
    if degenerate and DEBUG:
        print(f"⚠ degenerate chain (std {sigma}), bandwidth floored to {bandwidth}")
    return PosteriorSummary(mean=MaterialParams(*mean), covariance=covariance,
                            kde=BoxKde(samples, bandwidth, prior), degenerate=degenerate, n=n, prior=prior)


def credible_level(summary: PosteriorSummary, point) -> float:
    """Smallest highest-density level whose region contains the point (0 = mode, 1 = outside)."""
    b, c = _pair(point)
    f_point = float(summary.kde.density(b, c))
    return float(np.mean(summary.sample_densities() > f_point))


def in_credible_region(summary: PosteriorSummary, point, level: float = 0.95) -> bool:
    if not 0 < level < 1:
        raise InvalidArgumentError(f"credible level must lie in (0, 1), got {level}")
    return credible_level(summary, point) <= level


def region_probability(chain: PosteriorChain, region: Callable,
                       min_samples: int = MIN_REGION_SAMPLES) -> RegionProbability:
    """Fraction of chain samples inside the region, binomial standard error attached."""
    n = chain.n
    if n < min_samples:
        raise InsufficientDataError(f"{n} samples, at least {min_samples} needed for a region probability")
    inside = np.asarray(region(chain.b, chain.c), dtype=bool)
    if inside.shape != (n,):
        inside = np.array([bool(region(b, c)) for b, c in chain.samples])
    p = float(inside.mean())
    return RegionProbability(probability=p, standard_error=float(np.sqrt(p * (1.0 - p) / n)), n=n)


def chain_for_scan(scan: AScan, cov: FeatureCovariance, window: EchoWindow, bins: Sequence[int],
                   pulse: Optional[ExcitationPulse], plate: PlateModel, prior: PriorBox = PriorBox(),
                   options: McmcOptions = McmcOptions(), t_ex: Optional[float] = None,
                   smoothing: SmoothingOptions = SmoothingOptions()) -> PosteriorChain:
    """Chain of one location, seeded from (root seed, grid index)."""
    if pulse is None:
        if t_ex is None:
            raise InvalidArgumentError("t_ex is required when the pulse is taken from the scan")
        pulse = excitation_from_scan(scan, t_ex, smoothing)
    alpha = extract_features(scan, window, bins)
    model = make_model_features(pulse, plate, window, bins)
    return run_chain(alpha, cov, prior, options.schedule, options.burn_in, options.n,
                     seed=location_seed(options.root_seed, scan.index), model_features=model,
                     cache=options.cache)


def run_cells(scans: ScanSet, work: Callable, workers: Optional[int] = None, label: str = 'cells'):
    """
    work(index, scan) over the usable locations.

    A failing cell is reported and left out; only when every cell failed is
    the first error raised.

    Returns:
        (results by index, failure message by index)
    """
    done, failed = grid_workers.run_grid_collect(((s.index, s) for s in scans.usable()), work,
                                                 workers=workers, label=label)
    if failed and not done:
        raise next(iter(failed.values()))
    failures = {index: f"{type(e).__name__}: {e}" for index, e in failed.items()}
    for index, message in failures.items():
        print(f"⚠ cell {index} failed: {message}")
    return done, failures


@dataclass(frozen=True)
class PosteriorCell:
    b: float
    c: float
    std_b: float
    std_c: float
    acceptance: float
    unreliable: bool = False


POSTERIOR_UNITS = {'b': '1/us', 'c': 'L/us', 'std_b': '1/us', 'std_c': 'L/us', 'acceptance': 'fraction'}


@dataclass(frozen=True, eq=False)
class PosteriorMap:
    shape: Tuple[int, int]
    results: Dict[Tuple[int, int], Optional[PosteriorCell]]
    resolution: Tuple[float, float] = (5.0, 5.0)
    label: str = ''
    origin: Tuple[float, float] = (0.0, 0.0)
    chains: Dict[Tuple[int, int], PosteriorChain] = field(default_factory=dict)
    failures: Dict[Tuple[int, int], str] = field(default_factory=dict)

    def values(self, name: str) -> np.ndarray:
        if name not in POSTERIOR_UNITS:
            raise InvalidArgumentError(f"unknown layer '{name}', expected one of {sorted(POSTERIOR_UNITS)}")
        return cell_values(self.results, self.shape, name)

    def layer(self, name: str) -> MapLayer:
        return MapLayer.from_grid(self.values(name), name, POSTERIOR_UNITS[name], self.resolution, self.origin)

    def unreliable_cells(self) -> List[Tuple[int, int]]:
        return [idx for idx, cell in self.results.items() if cell is not None and cell.unreliable]


def posterior_map(scans: ScanSet, cov: FeatureCovariance, window: EchoWindow, bins: Sequence[int],
                  pulse: Optional[ExcitationPulse], plate: PlateModel, prior: PriorBox = PriorBox(),
                  options: McmcOptions = McmcOptions(), keep_chains: bool = False,
                  smoothing: SmoothingOptions = SmoothingOptions()) -> PosteriorMap:
    """Posterior mean and spread of (b, c) per usable location; failed cells stay empty."""

    def work(index, scan):
        chain = chain_for_scan(scan, cov, window, bins, pulse, plate, prior, options, t_ex=scans.t_ex,
                               smoothing=smoothing)
        mean = chain.samples.mean(axis=0)
        std = chain.samples.std(axis=0, ddof=1)
        cell = PosteriorCell(b=float(mean[0]), c=float(mean[1]), std_b=float(std[0]), std_c=float(std[1]),
                             acceptance=chain.acceptance_rate, unreliable=chain.unreliable)
        return cell, chain

    done, failures = run_cells(scans, work, options.workers, 'posterior cells')
    nx, ny = scans.shape
    results = {(ix, iy): done[(ix, iy)][0] if (ix, iy) in done else None
               for iy in range(ny) for ix in range(nx)}
    chains = {idx: value[1] for idx, value in done.items()} if keep_chains else {}
    return PosteriorMap(shape=scans.shape, results=results, resolution=scans.resolution,
                        label=scans.label, origin=scans.origin, chains=chains, failures=failures)
