"""Light-atom coupling correlations along Monte Carlo trajectories.

Each atom carries two instantaneous complex factors: a transverse beam
envelope (``xy``) set by its x, y position, and a longitudinal factor
(``z_factor``) combining the standing-wave phases with the Doppler-shifted
optical response of its z motion.  The module estimates the ensemble
correlation function of the product of the two factors versus time lag —
the single object the write-efficiency, spectrum and readout calculations
integrate against — and fits its exponential decay rate.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np
from scipy.fft import next_fast_len
from scipy.optimize import minimize_scalar

from .errors import FitFailureError, InsufficientDataError
from .model import OpticalConfig, SpeciesConstants
from .motion import Trajectory

__all__ = [
    "CouplingSample",
    "CorrelationSeries",
    "eval_z_factor",
    "eval_xy",
    "coupling_sample",
    "estimate_correlation",
    "fit_exponential",
    "lagged_mean_products",
    "series_to_csv",
    "series_from_csv",
    "DEFAULT_LAG_STEP",
]

DEFAULT_LAG_STEP = 2


@dataclass
class CouplingSample:
    """Instantaneous coupling factors of one atom."""

    xy: complex
    z_factor: complex


@dataclass
class CorrelationSeries:
    """Ensemble correlation of the combined coupling factor vs lag.

    ``values[k]`` estimates the mean of (factor at lag 0)* x (factor at
    lag ``lags[k]``); ``asymptote`` is the uncorrelated-limit product of
    squared means the values decay to.  ``waist_w`` and ``v_thermal``
    are carried along so decay-rate fits can report the dimensionless
    rate without re-supplying the geometry.
    """

    lags: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    asymptote: complex
    n_samples: int
    waist_w: float = float("nan")
    v_thermal: float = float("nan")


def eval_z_factor(z, v_z, cfg: OpticalConfig,
                  species: SpeciesConstants | None = None):
    """Longitudinal coupling factor for position ``z`` and velocity ``v_z``.

    Two-term form: each term carries a slowly varying phase at the
    standing-wave mismatch ``k_q - k_c`` and a rapidly varying phase at
    ``k_c + k_q``, divided by the complex optical response at the
    Doppler-shifted detuning ``delta ± k_c v_z``.  No small-mismatch
    approximation is made.  Vectorized over array inputs.
    """
    gamma = cfg.gamma
    delta = cfg.detuning
    k_c = cfg.k_c
    dk = cfg.k_q - cfg.k_c
    ksum = cfg.k_c + cfg.k_q
    z = np.asarray(z, dtype=float)
    v_z = np.asarray(v_z, dtype=float)
    denom_p = -0.5 * gamma + 1j * (delta + k_c * v_z)
    denom_m = -0.5 * gamma + 1j * (delta - k_c * v_z)
    term_p = (np.exp(1j * dk * z) - np.exp(-1j * ksum * z)) / denom_p
    term_m = (np.exp(-1j * dk * z) - np.exp(1j * ksum * z)) / denom_m
    return term_p + term_m


def eval_xy(positions, cfg: OpticalConfig):
    """Transverse envelope of the drive-times-cavity coupling product.

    Both the cavity coupling and the classical drive carry one Gaussian
    beam envelope, so their product falls off with twice the exponent.
    """
    positions = np.asarray(positions, dtype=float)
    x = positions[..., 0]
    y = positions[..., 1]
    envelope = np.exp(-2.0 * (x * x + y * y) / cfg.waist_w**2)
    return cfg.omega_amp * cfg.g_amp * envelope


def coupling_sample(position, velocity, cfg: OpticalConfig,
                    species: SpeciesConstants | None = None) -> CouplingSample:
    """Evaluate both coupling factors for a single atom sample."""
    position = np.asarray(position, dtype=float)
    xy = complex(eval_xy(position[None, :], cfg)[0])
    zf = complex(eval_z_factor(position[2], velocity[2], cfg, species))
    return CouplingSample(xy=xy, z_factor=zf)


def lagged_mean_products(first, second, n_lags: int,
                         conjugate_first: bool = True) -> np.ndarray:
    """Unbiased lagged product means of two equal-length complex series.

    Returns ``r`` with ``r[l] = mean_m op(first[m]) * second[m+l]`` for
    ``l = 0..n_lags-1``, where ``op`` conjugates when ``conjugate_first``.
    FFT-based, O((M+n_lags) log) per call.
    """
    first = np.asarray(first)
    second = np.asarray(second)
    m = first.shape[0]
    if second.shape[0] != m:
        raise ValueError("series length mismatch")
    if n_lags > m:
        raise ValueError("n_lags exceeds series length")
    nfft = next_fast_len(m + n_lags)
    base = first if conjugate_first else np.conj(first)
    spec = np.conj(np.fft.fft(base, nfft)) * np.fft.fft(second, nfft)
    raw = np.fft.ifft(spec)[:n_lags]
    counts = m - np.arange(n_lags)
    return raw / counts


def _atom_factor_series(traj: Trajectory, cfg: OpticalConfig,
                        species: SpeciesConstants | None,
                        lag_step: int):
    """Combined factor, envelope, and z factor on the strided grid."""
    pos = traj.positions[::lag_step]
    vel = traj.velocities[::lag_step]
    xy = eval_xy(pos, cfg)
    zf = eval_z_factor(pos[:, 2], vel[:, 2], cfg, species)
    return xy * zf, xy, zf


def estimate_correlation(trajectories: Sequence[Trajectory],
                         cfg: OpticalConfig,
                         species: SpeciesConstants,
                         s_max: float | None = None,
                         lag_step: int = DEFAULT_LAG_STEP,
                         threads: int = 1,
                         orientation: int = +1) -> CorrelationSeries:
    """Estimate the ensemble coupling correlation versus lag.

    All time origins on a grid strided by ``lag_step`` samples
    contribute; the standard error is taken between atoms, since origins
    within one trajectory are strongly correlated.  ``orientation=-1``
    evaluates the reversed-lag estimator (conjugating partner taken at
    the later time), used to check Hermitian symmetry.

    Raises
    ------
    InsufficientDataError
        If no trajectories are given or fewer than 100 (atom x origin)
        pairs contribute to the deepest lag.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise InsufficientDataError("no trajectories given")
    if lag_step < 1:
        raise ValueError("lag_step must be >= 1")
    if orientation not in (+1, -1):
        raise ValueError("orientation must be +1 or -1")
    times = trajectories[0].sample_times
    dt = float(times[1] - times[0])
    duration = float(times[-1])
    ds = lag_step * dt
    v_thermal = species.doppler_width / cfg.k_c
    if s_max is None:
        # Decay-rate guess 1.3 v/w; resolve five decay times.
        s_max = 5.0 * cfg.waist_w / (1.3 * v_thermal)
    if s_max > duration / 2 + 1e-12:
        raise ValueError(
            f"s_max={s_max:.3g} s exceeds half the trajectory duration "
            f"{duration:.3g} s")
    n_lags = int(math.floor(s_max / ds + 1e-9)) + 1
    m_strided = (len(times) + lag_step - 1) // lag_step
    n_atoms = len(trajectories)
    pairs_at_deepest = n_atoms * (m_strided - n_lags + 1)
    if pairs_at_deepest < 100:
        raise InsufficientDataError(
            f"only {pairs_at_deepest} (atom x origin) pairs at the deepest "
            "lag; need >= 100")

    per_atom = np.empty((n_atoms, n_lags), dtype=complex)
    mean_xy = np.empty(n_atoms, dtype=complex)
    mean_z = np.empty(n_atoms, dtype=complex)

    def work(i: int) -> None:
        factor, xy, zf = _atom_factor_series(trajectories[i], cfg, species,
                                             lag_step)
        if orientation < 0:
            factor = factor[::-1]
        per_atom[i] = lagged_mean_products(factor, factor, n_lags,
                                           conjugate_first=True)
        mean_xy[i] = np.mean(xy)
        mean_z[i] = np.mean(zf)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(n_atoms)))
    else:
        for i in range(n_atoms):
            work(i)

    values = per_atom.mean(axis=0)
    if n_atoms >= 2:
        var = (per_atom.real.var(axis=0, ddof=1)
               + per_atom.imag.var(axis=0, ddof=1))
        stderr = np.sqrt(var / n_atoms)
    else:
        stderr = np.full(n_lags, np.inf)
    xy_bar = mean_xy.mean()
    z_bar = mean_z.mean()
    asymptote = complex(abs(xy_bar) ** 2 * abs(z_bar) ** 2)
    lags = orientation * np.arange(n_lags) * ds
    return CorrelationSeries(lags=lags, values=values, stderr=stderr,
                             asymptote=asymptote, n_samples=pairs_at_deepest,
                             waist_w=cfg.waist_w, v_thermal=v_thermal)


def _fit_weights(stderr: np.ndarray) -> np.ndarray:
    finite = np.isfinite(stderr) & (stderr > 0)
    if not finite.any():
        return np.ones_like(stderr)
    fill = float(np.median(stderr[finite]))
    safe = np.where(finite, stderr, fill)
    return 1.0 / safe**2


def fit_exponential(series: CorrelationSeries,
                    max_reduced_chisq: float = 5.0):
    """Fit the decay rate of a correlation series.

    Model: value(s) = asymptote + amplitude * e^{-rate*s}, i.e. an
    exponential decaying from its zero-lag intercept to the pinned
    asymptote.  The amplitude is left free (and profiled out in closed
    form, since the model is linear in it): the measured zero-lag point
    contains a delta-correlated contribution from the rapidly varying
    counter-propagating phases that is gone by the first nonzero lag,
    so pinning the amplitude to it would bias the rate.

    Returns ``(rate, alpha, reduced_chisq)`` where ``alpha`` is the
    dimensionless rate ``rate * waist / v_thermal`` (NaN when the series
    carries no geometry metadata).

    Raises
    ------
    FitFailureError
        If the reduced chi-square exceeds ``max_reduced_chisq`` or the
        lag range resolves fewer than three decay times.
    """
    lags = np.abs(np.asarray(series.lags, dtype=float))
    if len(lags) < 10:
        raise ValueError("need at least 10 lags to fit a decay rate")
    y = np.asarray(series.values).real
    asym = complex(series.asymptote).real
    weights = _fit_weights(np.asarray(series.stderr, dtype=float))
    dy = y - asym

    def profile(log_rate: float):
        """Best amplitude and chi-square at a fixed rate."""
        e = np.exp(-math.exp(log_rate) * lags)
        denom = float(np.sum(weights * e * e))
        amp = float(np.sum(weights * e * dy)) / denom if denom > 0 else 0.0
        chi = float(np.sum(weights * (dy - amp * e) ** 2))
        return amp, chi

    s_span = lags[-1]
    s_step = lags[1]
    grid = np.linspace(math.log(0.03 / s_span), math.log(30.0 / s_step), 240)
    vals = [profile(g)[1] for g in grid]
    k = int(np.argmin(vals))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(lambda g: profile(g)[1], bounds=(lo, hi),
                          method="bounded", options={"xatol": 1e-12})
    rate = math.exp(res.x)
    dof = max(len(lags) - 2, 1)
    reduced = profile(res.x)[1] / dof
    if reduced > max_reduced_chisq:
        raise FitFailureError(
            f"reduced chi-square {reduced:.2f} exceeds {max_reduced_chisq}")
    if rate * s_span < 3.0:
        raise FitFailureError(
            f"lag range spans only {rate * s_span:.2f} decay times (< 3)")
    alpha = rate * series.waist_w / series.v_thermal
    return rate, alpha, reduced


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------

CSV_HEADER = "lag_s,re,im,stderr"


def series_to_csv(series: CorrelationSeries, fh: IO[str]) -> None:
    """Write a correlation series with a mandatory header row."""
    fh.write(CSV_HEADER + "\n")
    for lag, val, err in zip(series.lags, series.values, series.stderr):
        fh.write(f"{lag:.17g},{val.real:.17g},{val.imag:.17g},{err:.17g}\n")


def series_from_csv(fh: IO[str]) -> CorrelationSeries:
    """Read back a series written by :func:`series_to_csv`.

    The asymptote and geometry metadata are not part of the CSV contract
    and come back as NaN.
    """
    header = fh.readline().strip()
    if header != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {header!r}")
    rows = [line.strip().split(",") for line in fh if line.strip()]
    lags = np.array([float(r[0]) for r in rows])
    values = np.array([float(r[1]) + 1j * float(r[2]) for r in rows])
    stderr = np.array([float(r[3]) for r in rows])
    return CorrelationSeries(lags=lags, values=values, stderr=stderr,
                             asymptote=complex("nan"),
                             n_samples=0)
