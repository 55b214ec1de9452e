"""Write-step efficiency of the motional-averaging memory.

Two evaluation routes are provided for the heralding efficiency:

* a closed form that models the coupling correlations as a single
  exponential decaying at the beam-transit rate, and
* a semianalytic route that contracts a *measured* correlation series
  against the exact filter kernel in the lag variable.

The module also carries the supporting budget estimates that decide
whether spectral filtering is feasible: the ensemble optical depth (with
the Faraday-angle inversion used to calibrate it) and the classical
photon number that must be rejected per heralded photon.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import quad
from scipy.special import wofz

from . import _kernels
from .correlations import CorrelationSeries
from .errors import InsufficientDataError, KernelValidationError
from .model import (
    CellConfig,
    OpticalConfig,
    SpeciesConstants,
    warn_if_beam_clipped,
)

__all__ = [
    "WriteMethod",
    "WriteResult",
    "OpticalDepthResult",
    "PhotonBudget",
    "faddeeva",
    "line_shape_argument",
    "theta_mean",
    "a_factor",
    "eta_write_closed",
    "eta_write_semianalytic",
    "validate_write_kernel",
    "vector_polarizability",
    "optical_depth",
    "atoms_for_depth",
    "classical_photon_budget",
    "multi_excitation_error",
    "transit_decay_rate",
    "sweep_kappa2",
    "WRITE_SWEEP_HEADER",
]

#: Default ratio between the correlation decay rate and v_thermal / w used
#: when the caller does not supply a fitted transit rate.
DEFAULT_TRANSIT_ALPHA = 1.3


class WriteMethod(enum.Enum):
    """How a :class:`WriteResult` was obtained."""

    CLOSED_FORM = "closed-form"
    SEMIANALYTIC = "semianalytic"


@dataclass(frozen=True)
class WriteResult:
    """Write-step efficiency and the two moments it is built from.

    ``theta_mean_sq`` is the squared magnitude of the ensemble-averaged
    accumulated amplitude per atom and ``theta_sq_mean`` the ensemble
    average of its squared magnitude (time-averaged over the pulse for
    the semianalytic route); their ratio is the efficiency.
    """

    eta_write: float
    theta_mean_sq: float
    theta_sq_mean: float
    method: WriteMethod
    #: Simplified limiting form (fast cell cavity, far detuning); nan when
    #: not applicable.
    eta_limit: float = float("nan")
    #: Mean number of beam transits per filter decay time; nan when not
    #: applicable.
    n_pass: float = float("nan")
    #: Richardson estimate of the lag-quadrature error (semianalytic only).
    quadrature_error: float = 0.0


@dataclass(frozen=True)
class OpticalDepthResult:
    """Resonant, Doppler-free optical depth of the ensemble."""

    d: float
    faraday_angle: float  # rad; nan when no probe detuning was given
    n_atoms_effective: float


@dataclass(frozen=True)
class PhotonBudget:
    """Classical photons to be filtered per heralded photon.

    ``filter_constant`` is the numerator C of n_classical = C / (d F^2),
    so the budget for other (depth, finesse) points follows by scaling.
    """

    n_classical: float
    filter_constant: float


def faddeeva(z: complex) -> complex:
    """Scaled complex error function w(z) = exp(-z^2) erfc(-iz).

    Only the closed upper half plane is accepted: all physical arguments
    here have Im(z) proportional to a decay rate, and the lower half
    plane would require analytic continuation that this wrapper does not
    perform.

    Raises
    ------
    ValueError
        If ``Im(z) < 0``.
    """
    z = complex(z)
    if z.imag < 0.0:
        raise ValueError(f"faddeeva requires Im(z) >= 0, got {z!r}")
    return complex(wofz(z))


def line_shape_argument(cfg: OpticalConfig, species: SpeciesConstants) -> complex:
    """Dimensionless complex detuning (detuning + i*gamma/2) / doppler_width."""
    return (cfg.detuning + 0.5j * cfg.gamma) / species.doppler_width


def transit_decay_rate(cfg: OpticalConfig, cell: CellConfig,
                       alpha: float = DEFAULT_TRANSIT_ALPHA) -> float:
    """Estimated correlation decay rate alpha * v_thermal / waist."""
    return alpha * cell.v_thermal / cfg.waist_w


def theta_mean(cfg: OpticalConfig, cell: CellConfig,
               species: SpeciesConstants) -> complex:
    """Steady-state ensemble mean of the accumulated write amplitude.

    Averaging the transverse Gaussian profile over the cell cross section
    and the Doppler-shifted longitudinal response over the thermal
    velocity distribution leaves a product of the beam fill factor
    ``w^2/L^2``, the complex Doppler line shape, and the double-filter
    DC gain ``1/(kappa1*kappa2)``.  Valid once both cavity responses
    have rung up (t >> 1/kappa2).
    """
    zeta = line_shape_argument(cfg, species)
    prefactor = math.pi ** 1.5 * cfg.g_amp * cfg.omega_amp / (4.0 * species.doppler_width)
    geometry = cfg.waist_w ** 2 / cell.half_width_L ** 2
    return prefactor * faddeeva(zeta) * geometry / (cfg.kappa1 * cfg.kappa2)


def a_factor(kappa1: float, kappa2: float, corr_rate: float) -> float:
    """Filter-weighted correlation time of an exponentially decaying memory.

    Closed form of the double-filter lag integral for a correlation that
    decays at ``corr_rate``; reduces to 1/(kappa1*kappa2)^2 when the
    correlations do not decay at all.
    """
    if kappa1 <= 0 or kappa2 <= 0 or corr_rate < 0:
        raise ValueError("rates must be positive (corr_rate >= 0)")
    two_g = 2.0 * corr_rate
    return (two_g + kappa1 + kappa2) / (
        kappa1 * kappa2 * (two_g + kappa1) * (two_g + kappa2) * (kappa1 + kappa2)
    )


def _theta_sq_mean_closed(cfg: OpticalConfig, cell: CellConfig,
                          species: SpeciesConstants, corr_rate: float,
                          mean_sq: float) -> float:
    """Ensemble mean of |amplitude|^2 under the exponential-correlation model."""
    zeta = line_shape_argument(cfg, species)
    wz = faddeeva(zeta)
    a_val = a_factor(cfg.kappa1, cfg.kappa2, corr_rate)
    k1, k2 = cfg.kappa1, cfg.kappa2
    gd = species.doppler_width
    fill = cfg.waist_w ** 2 / cell.half_width_L ** 2
    # Short-time (correlated) contribution: transverse profile variance and
    # the single-atom Doppler line shape, both filtered through A.
    lorentz_weight = (math.pi ** 2.5 / (32.0 * gd)) * fill ** 2 * (
        wz.real / (0.5 * cfg.gamma) + wz.imag / cfg.detuning
    )
    plateau_weight = (math.pi ** 2 / (4.0 * gd ** 2)) * abs(wz) ** 2 * fill
    coupling_sq = (cfg.g_amp * cfg.omega_amp) ** 2
    return (
        mean_sq * (1.0 - 2.0 * k1 ** 2 * k2 ** 2 * a_val)
        + coupling_sq * a_val * (lorentz_weight + plateau_weight)
    )


def eta_write_closed(cfg: OpticalConfig, cell: CellConfig,
                     species: SpeciesConstants,
                     corr_rate: float | None = None) -> WriteResult:
    """Write efficiency from the exponential-correlation closed form.

    Parameters
    ----------
    corr_rate : float, optional
        Decay rate of the coupling correlations.  Defaults to
        ``DEFAULT_TRANSIT_ALPHA * v_thermal / waist``; pass a fitted rate
        for quantitative work.

    Notes
    -----
    The closed form assumes a detuning large compared to the Doppler
    width; a warning is emitted outside that regime.  The returned
    ``eta_limit`` is the further simplification valid for a cell cavity
    much faster than both the transit rate and the filter, and ``n_pass``
    the implied number of beam transits per filter decay time.
    """
    if corr_rate is None:
        corr_rate = transit_decay_rate(cfg, cell)
    if cfg.detuning < 2.0 * species.doppler_width:
        warnings.warn(
            "detuning below twice the Doppler width; the closed-form write "
            "efficiency assumes far detuning",
            stacklevel=2,
        )
    warn_if_beam_clipped(cfg, cell)
    mean_sq = abs(theta_mean(cfg, cell, species)) ** 2
    sq_mean = _theta_sq_mean_closed(cfg, cell, species, corr_rate, mean_sq)
    fill = math.pi * cfg.waist_w ** 2 / (4.0 * cell.half_width_L ** 2)
    eta_limit = 1.0 / (
        1.0 + cfg.kappa2 / (2.0 * corr_rate + cfg.kappa2) * (1.0 / fill - 1.0)
    )
    n_pass = corr_rate * cfg.waist_w ** 2 / (cfg.kappa2 * cell.half_width_L ** 2)
    return WriteResult(
        eta_write=mean_sq / sq_mean,
        theta_mean_sq=mean_sq,
        theta_sq_mean=sq_mean,
        method=WriteMethod.CLOSED_FORM,
        eta_limit=eta_limit,
        n_pass=n_pass,
    )


def _resolve_asymptote(series: CorrelationSeries) -> float:
    """Long-lag plateau of the series; estimated from the tail if absent."""
    if np.isfinite(series.asymptote):
        return float(series.asymptote)
    tail = series.lags >= 0.8 * series.lags[-1]
    if np.count_nonzero(tail) < 4:
        raise InsufficientDataError(
            "correlation series records no asymptote and has fewer than 4 "
            "tail points to estimate one from"
        )
    return float(np.mean(series.values[tail].real))


def eta_write_semianalytic(series: CorrelationSeries, cfg: OpticalConfig,
                           t_int: float, *,
                           validate_kernel: bool = False) -> WriteResult:
    """Write efficiency from a measured coupling-correlation series.

    The pulse-integrated second moment is the lag integral of the series
    against an exact kernel (the four filter time integrations performed
    in closed form), split into the plateau part — which integrates to
    the same response integral as the first moment — plus a correction
    from the decaying part of the correlations, truncated at the last
    recorded lag.  The lag quadrature is a trapezoid on the series' own
    grid with a Richardson (half-grid) error estimate.

    Parameters
    ----------
    validate_kernel : bool
        When true, first cross-check the closed-form kernel against a
        nested numerical quadrature at randomized parameters (slow;
        intended for auditing runs).

    Raises
    ------
    KernelValidationError
        If ``validate_kernel`` is set and the cross-check disagrees by
        more than 1e-6 relative.
    """
    if t_int <= 0:
        raise ValueError("t_int must be > 0")
    if validate_kernel:
        validate_write_kernel(t_int, cfg.kappa1, cfg.kappa2)
    asym = _resolve_asymptote(series)
    # Plateau term: both moments share the squared ring-up response.
    response_sq = _kernels.write_response_sq_integral(cfg.kappa1, cfg.kappa2, t_int)
    numer = asym * response_sq / 16.0
    keep = series.lags <= min(series.lags[-1], t_int)
    lags = series.lags[keep]
    excess = series.values[keep].real - asym
    if lags.size < 2:
        raise InsufficientDataError("correlation series has fewer than 2 usable lags")
    h = _kernels.write_kernel(t_int, cfg.kappa1, cfg.kappa2, lags)
    correction = float(np.trapezoid(h * excess, lags))
    coarse = float(np.trapezoid((h * excess)[::2], lags[::2]))
    quad_err = abs(correction - coarse) / 3.0
    denom = numer + correction
    return WriteResult(
        eta_write=numer / denom,
        theta_mean_sq=numer / t_int,
        theta_sq_mean=denom / t_int,
        method=WriteMethod.SEMIANALYTIC,
        quadrature_error=quad_err,
    )


def _write_kernel_quadrature(t_int: float, kappa1: float, kappa2: float,
                             s: float) -> float:
    """Nested numerical quadrature of the defining four-fold lag integral.

    Innermost level: the single-filter memory integral
    ``V(T) = integral_0^T exp(-p(T-v)) exp(-q v) dv`` with p = kappa2/2,
    q = kappa1/2, integrated only over the boundary layer ``v <= 30/q``
    beyond which the integrand is below 1e-13 of its peak (an adaptive
    rule on the full interval can miss the layer entirely).  Outer
    levels: the pulse and lag-pair integrations.
    """
    p, q = 0.5 * kappa2, 0.5 * kappa1
    layer = 40.0 / q  # width of the fast-filter transient

    def memory(T: float) -> float:
        if T <= 0.0:
            return 0.0
        top = min(T, 30.0 / q)
        val, _ = quad(lambda v: math.exp(-p * (T - v) - q * v), 0.0, top,
                      epsabs=0.0, epsrel=1e-11, limit=200)
        return val

    def _split_quad(fun, lo: float, hi: float, epsrel: float) -> float:
        """Integrate with an explicit split at the transient scale.

        Both factors vary on the ``1/q`` scale near ``lo``; a single
        adaptive pass over a much longer interval can step straight over
        that layer, so it is integrated as its own panel.
        """
        total = 0.0
        cut = min(hi, lo + layer)
        for a, b in ((lo, cut), (cut, hi)):
            if b > a:
                val, _ = quad(fun, a, b, epsabs=0.0, epsrel=epsrel, limit=400)
                total += val
        return total

    def inner(t: float) -> float:
        # Lag-pair integral with the transient shifted to the origin.
        if t <= s:
            return 0.0
        return _split_quad(lambda T: memory(T) * memory(T + s),
                           0.0, t - s, epsrel=1e-10)

    val = _split_quad(inner, s, t_int, epsrel=1e-9)
    return 0.125 * val


def validate_write_kernel(t_int: float, kappa1: float, kappa2: float, *,
                          n_points: int = 20, rtol: float = 1e-6,
                          seed: int = 0) -> float:
    """Cross-check the closed-form write kernel against nested quadrature.

    Draws ``n_points`` randomized (t_int, kappa1, kappa2, s) tuples in a
    band around the supplied values and compares the closed form to the
    direct multi-integral.  Returns the worst relative deviation.

    Raises
    ------
    KernelValidationError
        If any point deviates by more than ``rtol`` relative.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_points):
        ti = t_int * 10.0 ** rng.uniform(-0.3, 0.3)
        k1 = kappa1 * 10.0 ** rng.uniform(-0.3, 0.3)
        k2 = kappa2 * 10.0 ** rng.uniform(-0.3, 0.3)
        sv = rng.uniform(0.0, 0.5) * ti
        closed = float(_kernels.write_kernel(ti, k1, k2, np.array([sv]))[0])
        oracle = _write_kernel_quadrature(ti, k1, k2, sv)
        scale = max(abs(oracle), abs(closed), 1e-300)
        rel = abs(closed - oracle) / scale
        worst = max(worst, rel)
        if rel > rtol:
            raise KernelValidationError(
                f"write kernel deviates {rel:.3e} (> {rtol:.1e}) from nested "
                f"quadrature at t_int={ti:.6e}, kappa1={k1:.6e}, "
                f"kappa2={k2:.6e}, s={sv:.6e}"
            )
    return worst


def vector_polarizability(probe_detuning: float,
                          split_35: float, split_45: float) -> float:
    """Detuning-dependent vector weight of the Faraday rotation signal.

    ``split_35`` and ``split_45`` are the splittings from the two lower
    excited hyperfine levels to the uppermost one; ``probe_detuning`` is
    measured from the uppermost level.  All three share units.
    """
    if probe_detuning == 0.0:
        raise ValueError("probe_detuning must be nonzero")
    return (
        -35.0 / (1.0 - split_35 / probe_detuning)
        - 21.0 / (1.0 - split_45 / probe_detuning)
        + 176.0
    ) / 120.0


def optical_depth(cell: CellConfig, species: SpeciesConstants,
                  wavelength: float, n_real_atoms: float | None = None, *,
                  faraday_angle: float | None = None,
                  probe_detuning: float | None = None,
                  split_35: float | None = None,
                  split_45: float | None = None) -> OpticalDepthResult:
    """Resonant Doppler-free optical depth of the cell ensemble.

    Exactly one of ``n_real_atoms`` and ``faraday_angle`` must be given.
    The depth follows the standard cross-section form

        d = 6 pi N / (2L)^2 * (wavelength/2pi)^2 * (branch sum / gamma),

    where the branch sum runs over the partial decay rates back to the
    pumped ground state.  A measured Faraday rotation angle (at probe
    detuning ``probe_detuning`` from the uppermost excited level) is
    inverted to the effective atom number through the vector
    polarizability; hyperfine splittings default to the species'
    cesium values when not supplied.
    """
    from .model import CS_EXC_SPLIT_35, CS_EXC_SPLIT_45

    if (n_real_atoms is None) == (faraday_angle is None):
        raise ValueError("give exactly one of n_real_atoms / faraday_angle")
    s35 = CS_EXC_SPLIT_35 if split_35 is None else split_35
    s45 = CS_EXC_SPLIT_45 if split_45 is None else split_45
    branch_sum = sum(species.gamma_branch_0)
    lam_bar = wavelength / (2.0 * math.pi)
    side = 2.0 * cell.half_width_L

    if faraday_angle is not None:
        if probe_detuning is None:
            raise ValueError("faraday_angle requires probe_detuning")
        a1 = vector_polarizability(probe_detuning, s35, s45)
        n_eff = abs(
            32.0 * math.pi * cell.half_width_L ** 2 * faraday_angle
            * probe_detuning / (a1 * species.gamma * wavelength ** 2)
        )
        angle = faraday_angle
    else:
        n_eff = float(n_real_atoms)
        if probe_detuning is not None:
            a1 = vector_polarizability(probe_detuning, s35, s45)
            angle = abs(
                n_eff * a1 * species.gamma * wavelength ** 2
                / (32.0 * math.pi * cell.half_width_L ** 2 * probe_detuning)
            )
        else:
            angle = float("nan")

    d = 6.0 * math.pi * n_eff / side ** 2 * lam_bar ** 2 * (branch_sum / species.gamma)
    return OpticalDepthResult(d=d, faraday_angle=angle, n_atoms_effective=n_eff)


def atoms_for_depth(depth: float, cell: CellConfig,
                    species: SpeciesConstants, wavelength: float) -> float:
    """Atom number that reproduces a target resonant optical depth.

    Inverse of the cross-section form used by :func:`optical_depth`;
    useful when a measured depth, rather than a counted atom number, is
    the experimentally anchored quantity.
    """
    if depth <= 0:
        raise ValueError("depth must be > 0")
    branch_sum = sum(species.gamma_branch_0)
    lam_bar = wavelength / (2.0 * math.pi)
    side = 2.0 * cell.half_width_L
    return depth * side ** 2 * species.gamma / (
        6.0 * math.pi * lam_bar ** 2 * branch_sum)


def classical_photon_budget(cfg: OpticalConfig, cell: CellConfig,
                            species: SpeciesConstants, d: float,
                            finesse: float) -> PhotonBudget:
    """Classical drive photons per heralded photon after spectral filtering.

    Produced by equating the heralded photon number to one and expressing
    the drive power through the optical depth; the result scales as
    1/(d * finesse^2).  ``species.beta`` and ``species.beta2`` are the
    dipole-strength ratios of the drive and of the two cavity-coupled
    transitions to the heralding transition.
    """
    if d <= 0 or finesse <= 0:
        raise ValueError("d and finesse must be > 0")
    lam_bar = (2.0 * math.pi / cfg.k_q) / (2.0 * math.pi)
    branch_sum = sum(species.gamma_branch_0)
    constant = (
        8.0 * math.pi * species.beta2 ** 2 * cell.half_width_L ** 2
        * cfg.detuning ** 2
        / (3.0 * species.beta * lam_bar ** 2 * species.gamma * branch_sum)
    )
    return PhotonBudget(n_classical=constant / (d * finesse ** 2),
                        filter_constant=constant)


def multi_excitation_error(p_e: float, eta_d: float) -> float:
    """Leading-order infidelity from undetected double excitations."""
    if not 0.0 <= p_e <= 1.0 or not 0.0 <= eta_d <= 1.0:
        raise ValueError("p_e and eta_d must lie in [0, 1]")
    return 2.0 * (1.0 - eta_d) * p_e


WRITE_SWEEP_HEADER = "kappa2_hz,eta_write_closed,eta_write_semianalytic,n_pass"


def sweep_kappa2(cfg: OpticalConfig, cell: CellConfig,
                 species: SpeciesConstants, series: CorrelationSeries,
                 kappa2_values: np.ndarray, *, t_int_factor: float = 10.0,
                 corr_rate: float | None = None) -> list[dict[str, float]]:
    """Closed-form and semianalytic efficiencies over a filter-width grid.

    ``t_int_factor`` sets the pulse length as a multiple of the filter
    decay time 1/kappa2 for the semianalytic route.
    """
    rows: list[dict[str, float]] = []
    for kappa2 in np.asarray(kappa2_values, dtype=float):
        cfg_k = replace(cfg, kappa2=float(kappa2))
        closed = eta_write_closed(cfg_k, cell, species, corr_rate=corr_rate)
        semi = eta_write_semianalytic(series, cfg_k, t_int_factor / float(kappa2))
        rows.append({
            "kappa2_hz": float(kappa2) / (2.0 * math.pi),
            "eta_write_closed": closed.eta_write,
            "eta_write_semianalytic": semi.eta_write,
            "n_pass": closed.n_pass,
        })
    return rows
