"""Scattered-light power spectral density and its processing chain.

The spectrum of the forward-scattered light separates the two timescales
of the atomic motion: single beam transits produce a broad pedestal,
repeated in-phase returns produce a narrow coherent peak carrying the
collective signal.  This module builds the spectrum from a measured
coupling-correlation series, applies the two-frequency reference
subtraction used to strip frequency-independent noise, rebins to a
display resolution, and converts peak heights to scattered photon
numbers against the shot-noise floor.

Conventions: frequencies are ordinary Hz (not angular); the flat photon
shot-noise level is 1 by construction, so spectral heights read directly
as photons per unit bandwidth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import curve_fit

from .correlations import CorrelationSeries
from .errors import FitFailureError

__all__ = [
    "PsdSeries",
    "psd_from_correlation",
    "subtract_reference",
    "rebin",
    "count_photons",
    "chi_squared_distance",
    "PSD_CSV_HEADER",
    "psd_to_csv",
    "psd_from_csv",
]


@dataclass(frozen=True)
class PsdSeries:
    """Binned one-sided power spectral density in shot-noise units."""

    freqs: np.ndarray  # Hz, bin centers
    psd: np.ndarray  # power per bin, shot noise = 1
    bin_width: float  # Hz
    larmor: float  # Hz, modulation frequency of the atomic feature
    #: Flat noise floor included in ``psd`` (0 for an atomic-only spectrum).
    shot_level: float = 1.0

    def __post_init__(self) -> None:
        if self.freqs.shape != self.psd.shape:
            raise ValueError("freqs and psd must have matching shapes")
        if self.bin_width <= 0:
            raise ValueError("bin_width must be > 0")
        if not np.all(np.isfinite(self.psd)):
            raise ValueError("psd contains non-finite values")

    @property
    def larmor_index(self) -> int:
        """Index of the bin whose center is closest to the Larmor frequency."""
        return int(np.argmin(np.abs(self.freqs - self.larmor)))


def psd_from_correlation(series: CorrelationSeries, t_int: float,
                         larmor_hz: float, *, bin_width: float | None = None,
                         f_min: float = 0.0, f_max: float | None = None,
                         scale: float = 1.0, shot_level: float = 1.0,
                         grid_anchor_hz: float | None = None) -> PsdSeries:
    """Finite-window spectrum of the coupling correlations at the Larmor line.

    The correlation is split into its long-lag plateau and the connected
    (decaying) part.  Integrated over a window of length ``t_int``, the
    plateau contributes ``sinc^2((f - larmor) * t_int)`` — all of its
    power lands in the Larmor bin on the natural grid — while the
    connected part gives the broad pedestal

        (2/t_int^2) Re prefactor-integral of (t_int - s) (C(s) - plateau) e^{2 i pi (f - larmor) s}.

    The grid is aligned so that ``grid_anchor_hz`` (the Larmor frequency
    itself by default) is exactly a bin center, which keeps the coherent
    power in a single bin (the discrete-delta convention).  Pass the
    first spectrum's Larmor frequency as the anchor when simulating a
    reference at a second modulation frequency, so both spectra share
    one analyzer grid.  ``scale`` converts raw correlation units to
    shot-noise units; ``shot_level`` adds the flat noise floor.

    Raises
    ------
    ValueError
        If an explicit ``bin_width`` is below the transform resolution
        ``1/t_int``.
    """
    if t_int <= 0:
        raise ValueError("t_int must be > 0")
    native = 1.0 / t_int
    if bin_width is None:
        bin_width = native
    elif bin_width < native * (1.0 - 1e-12):
        raise ValueError(
            f"bin_width {bin_width:g} Hz is below the transform resolution "
            f"1/t_int = {native:g} Hz"
        )
    if f_max is None:
        f_max = 4.0 * larmor_hz
    if f_max <= f_min:
        raise ValueError("f_max must exceed f_min")
    anchor = larmor_hz if grid_anchor_hz is None else grid_anchor_hz
    # Bin centers on a grid through the anchor frequency.
    m_lo = math.ceil((f_min - anchor) / bin_width - 1e-9)
    m_hi = math.floor((f_max - anchor) / bin_width + 1e-9)
    freqs = anchor + np.arange(m_lo, m_hi + 1) * bin_width

    keep = series.lags <= min(series.lags[-1], t_int)
    lags = series.lags[keep]
    # The plateau is a product of squared moduli, so it is real even
    # when the series carries a complex dtype.
    asym = complex(series.asymptote).real if np.isfinite(
        series.asymptote) else float(
        np.mean(series.values[keep][lags >= 0.8 * lags[-1]].real))
    connected = series.values[keep] - asym

    df = freqs - larmor_hz
    window = (t_int - lags) * connected
    phase = np.exp(2j * math.pi * df[:, None] * lags[None, :])
    pedestal = 2.0 / t_int ** 2 * np.trapezoid(
        (phase * window[None, :]).real, lags, axis=1)
    # Plateau: exact finite-window transform of a constant.
    x = df * t_int
    coherent = asym * np.sinc(x) ** 2
    psd = shot_level + scale * (coherent + pedestal)
    return PsdSeries(freqs=freqs, psd=psd, bin_width=bin_width,
                     larmor=larmor_hz, shot_level=shot_level)


def _lorentzian(f: np.ndarray, amp: float, half_width: float, center: float,
                offset: float) -> np.ndarray:
    return amp * half_width ** 2 / ((f - center) ** 2 + half_width ** 2) + offset


def fit_pedestal(psd: PsdSeries, *, max_residual: float = 0.25,
                 mask_bins: int = 1) -> tuple[float, float, float, float]:
    """Lorentzian fit (amp, half_width, center, offset) of the broad feature.

    The ``mask_bins`` bins nearest the Larmor frequency are excluded so
    the coherent peak does not skew the pedestal. Raises
    :class:`FitFailureError` when the rms residual exceeds
    ``max_residual`` of the fitted amplitude.
    """
    mask = np.ones(psd.freqs.size, dtype=bool)
    i0 = psd.larmor_index
    lo, hi = max(0, i0 - mask_bins + 1), min(psd.freqs.size, i0 + mask_bins)
    mask[lo:hi] = False
    f, y = psd.freqs[mask], psd.psd[mask]
    if f.size < 8:
        raise FitFailureError("too few bins outside the coherent peak to fit")
    offset0 = float(np.median(y))
    hw0 = max(psd.bin_width * 3.0, (f[-1] - f[0]) / 50.0)
    spread = float(np.ptp(y))
    if spread <= max(1e-12, 1e-9 * abs(offset0)):
        # Featureless reference: a zero-amplitude feature fits it exactly.
        return 0.0, hw0, psd.larmor, offset0
    amp0 = max(float(np.max(y) - offset0), 1e-12)
    span = f[-1] - f[0]
    try:
        popt, _ = curve_fit(
            _lorentzian, f, y, p0=(amp0, hw0, psd.larmor, offset0),
            bounds=((0.0, psd.bin_width * 0.1, f[0], -np.inf),
                    (np.inf, span, f[-1], np.inf)),
            maxfev=20000)
    except RuntimeError as exc:  # pragma: no cover - optimizer failure path
        raise FitFailureError(f"pedestal fit did not converge: {exc}") from exc
    amp, hw, center, offset = map(float, popt)
    resid = y - _lorentzian(f, *popt)
    rms = float(np.sqrt(np.mean(resid ** 2)))
    if rms > max_residual * max(amp, 1e-12 * spread):
        raise FitFailureError(
            f"pedestal fit rms residual {rms:.3e} exceeds "
            f"{max_residual:.2f} x amplitude {amp:.3e}"
        )
    return amp, hw, center, offset


def subtract_reference(psd_a: PsdSeries, psd_b: PsdSeries, *,
                       max_residual: float = 0.25) -> PsdSeries:
    """Remove the reference spectrum's broad feature from ``psd_a``.

    Mirrors the two-frequency measurement trick: a second spectrum taken
    at a different modulation frequency carries the same
    frequency-independent noise, so subtracting its (fitted, smooth)
    atomic feature isolates the feature of interest.  Only the fitted
    Lorentzian — not the flat offset — is subtracted, so a reference with
    no atomic signal leaves ``psd_a`` unchanged.
    """
    if psd_a.freqs.shape != psd_b.freqs.shape or not np.allclose(
            psd_a.freqs, psd_b.freqs, rtol=0.0, atol=1e-9 * psd_a.bin_width):
        raise ValueError("spectra must share one frequency grid")
    amp, hw, center, _ = fit_pedestal(psd_b, max_residual=max_residual)
    cleaned = psd_a.psd - _lorentzian(psd_a.freqs, amp, hw, center, 0.0)
    return replace(psd_a, psd=cleaned)


def rebin(psd: PsdSeries, target_width_hz: float) -> PsdSeries:
    """Aggregate to a coarser grid, conserving integrated power.

    The target width must be an (approximate) integer multiple of the
    native width; member bins are averaged, which preserves
    ``sum(psd * bin_width)`` exactly on the aggregated span.  Trailing
    bins that do not fill a complete group are dropped.
    """
    if target_width_hz < psd.bin_width * (1.0 - 1e-9):
        raise ValueError("target bin width is finer than the native width")
    factor = int(round(target_width_hz / psd.bin_width))
    if not math.isclose(factor * psd.bin_width, target_width_hz,
                        rel_tol=1e-6):
        raise ValueError("target width must be an integer multiple of the "
                         "native width")
    if factor == 1:
        return psd
    n_groups = psd.freqs.size // factor
    if n_groups == 0:
        raise ValueError("fewer bins than one aggregated group")
    trimmed_f = psd.freqs[: n_groups * factor].reshape(n_groups, factor)
    trimmed_p = psd.psd[: n_groups * factor].reshape(n_groups, factor)
    return replace(psd, freqs=trimmed_f.mean(axis=1),
                   psd=trimmed_p.mean(axis=1),
                   bin_width=factor * psd.bin_width)


def count_photons(psd: PsdSeries, t_ms: float) -> tuple[float, float]:
    """Scattered photons per sideband over a pulse of length ``t_ms``.

    The Larmor-bin height above both the flat floor and the local
    pedestal, in shot-noise units, equals the photons collected per
    transform time ``1/bin_width``; the count scales linearly to the
    requested pulse length and splits equally between the lower and
    upper sidebands.
    """
    if t_ms <= 0:
        raise ValueError("t_ms must be > 0")
    peak = float(psd.psd[psd.larmor_index])
    if peak - float(np.median(psd.psd)) <= 0.0:
        return (0.0, 0.0)
    amp, hw, center, offset = fit_pedestal(psd)
    pedestal_at_peak = float(
        _lorentzian(np.array([psd.larmor]), amp, hw, center, offset)[0])
    excess = max(peak - pedestal_at_peak, 0.0)
    n_total = excess * t_ms * psd.bin_width
    return (0.5 * n_total, 0.5 * n_total)


def chi_squared_distance(psd_a: PsdSeries, psd_b: PsdSeries,
                         sigma: np.ndarray | float) -> float:
    """Reduced chi-squared between two spectra on one grid."""
    if psd_a.freqs.shape != psd_b.freqs.shape:
        raise ValueError("spectra must share one frequency grid")
    diff = psd_a.psd - psd_b.psd
    chi2 = float(np.sum((diff / sigma) ** 2))
    return chi2 / diff.size


PSD_CSV_HEADER = "freq_hz,psd_shotnoise_units"


def psd_to_csv(psd: PsdSeries, path) -> None:
    """Write bin centers and heights; formatting is fixed for reproducibility."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(PSD_CSV_HEADER + "\n")
        for f, p in zip(psd.freqs, psd.psd):
            fh.write(f"{f:.17g},{p:.17g}\n")


def psd_from_csv(path, *, larmor_hz: float,
                 shot_level: float = 1.0) -> PsdSeries:
    """Load a spectrum written by :func:`psd_to_csv`.

    The bin width is recovered from the grid spacing; the Larmor
    frequency is not stored in the file and must be supplied.
    """
    data = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=float)
    data = np.atleast_2d(data)
    if data.shape[1] != 2:
        raise ValueError(f"{path}: expected 2 columns, got {data.shape[1]}")
    freqs, vals = data[:, 0], data[:, 1]
    if freqs.size < 2:
        raise ValueError(f"{path}: need at least 2 bins")
    widths = np.diff(freqs)
    if not np.allclose(widths, widths[0], rtol=1e-9):
        raise ValueError(f"{path}: frequency grid is not uniform")
    return PsdSeries(freqs=freqs, psd=vals, bin_width=float(widths[0]),
                     larmor=larmor_hz, shot_level=shot_level)
