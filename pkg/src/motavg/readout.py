"""Retrieval of the stored excitation as a cavity photon.

During retrieval a classical drive converts the shared spin excitation
back into a cavity field.  Averaging the light-atom coupling over the
thermal motion gives a linear two-mode system (cavity field + symmetric
spin mode) whose mean dynamics are exactly solvable; the residual
time-dependent coupling fluctuations of individual atoms enter as a
second-order correction (mostly spontaneous-emission loss) and as a
first-order leak from atoms incorrectly prepared in the readout state.

The module provides the ensemble-averaged coupling coefficients, the
zeroth-order retrieval efficiency through the downstream filter cavity,
the second-order correction built from simulated coupling-fluctuation
correlations, the incoherent-photon probability, and a small
finesse/cavity-detuning optimizer.
"""

from __future__ import annotations

import cmath
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import _kernels
from .correlations import DEFAULT_LAG_STEP, eval_z_factor, lagged_mean_products
from .errors import InsufficientDataError, KernelValidationError, NumericError
from .model import (
    CS_EXC_SPLIT_34,
    CS_EXC_SPLIT_45,
    CellConfig,
    OpticalConfig,
    SpeciesConstants,
)
from .motion import Trajectory
from .write import atoms_for_depth, faddeeva

__all__ = [
    "AuxLevel",
    "ReadoutCouplings",
    "FluctuationCorrelations",
    "ReadoutOptimum",
    "IncoherentResult",
    "CS_READOUT_AUX_LEVELS",
    "mean_couplings",
    "coupling_amplitude_for_depth",
    "drive_for_readout_rate",
    "eta_read_zeroth",
    "eta_read_limit",
    "implied_cooperativity",
    "eta_from_depth_finesse",
    "estimate_fluctuations",
    "second_order_parts",
    "second_order_term",
    "eta_read_second",
    "validate_readout_kernels",
    "p1_incoherent",
    "optimize_readout",
    "READOUT_SWEEP_HEADER",
    "P1_SWEEP_HEADER",
]

#: Pulse length in units of the inverse retrieval rate used throughout:
#: after three decay times a negligible excitation fraction remains.
DEFAULT_TAU_MULTIPLIER = 3.0

READOUT_SWEEP_HEADER = "tau_read_s,finesse_opt,detuning_opt,eta_read"
P1_SWEEP_HEADER = "kappa2_hz,p1_over_epsilon"


@dataclass(frozen=True)
class AuxLevel:
    """One additional excited level coupled during retrieval.

    ``delta_offset`` is the level's energy above the main excited level
    (rad/s), so the drive/cavity detuning from it is the configured
    detuning minus ``delta_offset``.  ``g_frac`` and ``omega_frac``
    scale the cavity and drive couplings relative to the main level; a
    level that one of the fields cannot address gets a zero fraction.
    ``gamma`` overrides the natural linewidth when the level's total
    decay rate differs from the main one (0 means "same").
    """

    delta_offset: float
    g_frac: float
    omega_frac: float
    gamma: float = 0.0


#: Default extra levels for the cesium retrieval scheme.  With the
#: stored excitation in the stretched F=3 ground state, a pi-polarized
#: drive and a sigma-polarized cavity photon share the m'=3 excited
#: sublevels: the level one hyperfine splitting below the main one
#: couples to both fields, the one above to the cavity field only (it
#: is out of reach of the drive), and the lowest excited level drops
#: out exactly.  The signed fractions are Clebsch-Gordan amplitude
#: ratios relative to the main transition, so the both-field level
#: contributes to the cross coupling with a positive product.
CS_READOUT_AUX_LEVELS: tuple[AuxLevel, ...] = (
    AuxLevel(delta_offset=-CS_EXC_SPLIT_34,
             g_frac=-math.sqrt(5.0 / 3.0),
             omega_frac=-math.sqrt(27.0 / 5.0)),
    AuxLevel(delta_offset=CS_EXC_SPLIT_45,
             g_frac=-math.sqrt(4.0 / 21.0),
             omega_frac=0.0),
)


@dataclass
class ReadoutCouplings:
    """Motion-averaged coefficients of the retrieval mode equations.

    ``a_bar`` is the cavity-field self-coupling (input-mirror decay,
    cavity detuning and the collective dispersive/absorptive shift),
    ``b_bar`` the spin-cavity cross coupling per atom and ``c_bar`` the
    spin self-coupling (drive-induced decay and light shift).
    ``d_disc`` is the discriminant ``(c_bar - a_bar)^2 + 4 N b_bar^2``
    of the two-mode system and ``gamma_read`` the slow eigenvalue
    ``(a_bar + c_bar + sqrt(d_disc))/2`` governing the retrieved-field
    envelope; its real part is negative whenever the collective gain
    stays below the total damping, and the retrieval rate is
    ``-Re(gamma_read)``.
    """

    a_bar: complex
    b_bar: complex
    c_bar: complex
    d_disc: complex
    gamma_read: complex
    n_atoms: float
    kappa1: float
    omega_drive: float
    g_amp: float

    def __post_init__(self) -> None:
        if not self.a_bar.real < 0:
            raise ValueError(
                "cavity self-coupling must have a negative real part "
                f"(got {self.a_bar:.6g}); collective absorption cannot "
                "exceed the mirror decay in the averaged system")
        if self.n_atoms <= 0 or self.kappa1 <= 0:
            raise ValueError("n_atoms and kappa1 must be > 0")

    @property
    def branch_root(self) -> complex:
        """Principal square root of the discriminant implied by the roots."""
        return 2.0 * self.gamma_read - (self.a_bar + self.c_bar)

    @property
    def gamma_slow(self) -> complex:
        """Alias for the slow eigenvalue (retrieved-field envelope)."""
        return self.gamma_read

    @property
    def gamma_fast(self) -> complex:
        """Fast eigenvalue (cavity-dominated transient)."""
        return (self.a_bar + self.c_bar) - self.gamma_read

    @property
    def readout_rate(self) -> float:
        """Envelope decay rate of the retrieved field, ``-Re(gamma_read)``."""
        return -self.gamma_read.real


@dataclass
class FluctuationCorrelations:
    """Lagged single-atom coupling-fluctuation correlations.

    Two product conventions are stored because the efficiency and the
    incoherent-photon integrals contract different orderings:

    * ``plain[k][i]`` is the mean of ``dX(t + lags[i]) * dY(t)`` — the
      plain product with the first-named factor at the *later* time —
      for ``(X, Y)`` running over (spin-cavity, spin-cavity),
      (spin-cavity, spin-self), (spin-self, spin-cavity) and
      (spin-self, spin-self) in rows 0..3.
    * ``conjugated[k][i]`` is the mean of ``conj(dX(t)) * dY(t +
      lags[i])`` — the conjugated factor at the *earlier* time — with
      the same row order.

    Both families carry the physical coupling amplitudes (``g_amp``,
    ``omega_amp`` record the values baked in, so the series can be
    rescaled exactly when only the drive strength changes).  Standard
    errors are the atom-to-atom spread of the per-atom estimates.
    """

    lags: np.ndarray
    plain: np.ndarray
    conjugated: np.ndarray
    stderr_plain: np.ndarray
    stderr_conjugated: np.ndarray
    n_samples: int
    g_amp: float = 1.0
    omega_amp: float = 1.0

    def __post_init__(self) -> None:
        self.lags = np.asarray(self.lags, dtype=float)
        self.plain = np.asarray(self.plain, dtype=complex)
        self.conjugated = np.asarray(self.conjugated, dtype=complex)
        n = self.lags.shape[0]
        for name in ("plain", "conjugated", "stderr_plain",
                     "stderr_conjugated"):
            arr = np.asarray(getattr(self, name))
            if arr.shape != (4, n):
                raise ValueError(f"{name} must have shape (4, {n})")
        if n and self.lags[0] != 0.0:
            raise ValueError("lag grid must start at 0")

    # Row accessors named after the contracted coupling pair.
    @property
    def bb(self) -> np.ndarray:
        return self.plain[0]

    @property
    def bc(self) -> np.ndarray:
        return self.plain[1]

    @property
    def cb(self) -> np.ndarray:
        return self.plain[2]

    @property
    def cc(self) -> np.ndarray:
        return self.plain[3]

    @property
    def bb_conj(self) -> np.ndarray:
        return self.conjugated[0]

    @property
    def bc_conj(self) -> np.ndarray:
        return self.conjugated[1]

    @property
    def cb_conj(self) -> np.ndarray:
        return self.conjugated[2]

    @property
    def cc_conj(self) -> np.ndarray:
        return self.conjugated[3]

    def with_amplitudes(self, g_amp: float,
                        omega_amp: float) -> "FluctuationCorrelations":
        """Rescale the series to new coupling amplitudes.

        The spin-cavity fluctuation scales with ``g_amp * omega_amp``
        and the spin-self one with ``omega_amp**2``, so the four rows
        rescale exactly without re-simulating.
        """
        if self.g_amp <= 0 or self.omega_amp <= 0:
            raise ValueError("stored amplitudes must be > 0 to rescale")
        rb = (g_amp * omega_amp) / (self.g_amp * self.omega_amp)
        rc = (omega_amp / self.omega_amp) ** 2
        row = np.array([rb * rb, rb * rc, rb * rc, rc * rc])[:, None]
        return FluctuationCorrelations(
            lags=self.lags.copy(),
            plain=self.plain * row,
            conjugated=self.conjugated * row,
            stderr_plain=self.stderr_plain * row,
            stderr_conjugated=self.stderr_conjugated * row,
            n_samples=self.n_samples,
            g_amp=g_amp,
            omega_amp=omega_amp,
        )


# ---------------------------------------------------------------------------
# Mean couplings.
# ---------------------------------------------------------------------------


def _mean_line_factor(detuning: float, gamma: float, doppler_width: float,
                      two_k_lz: float) -> complex:
    """Thermal/positional average of the per-atom line-shape factor.

    The standing-wave phases average over a uniform position to
    ``sin(x)/x`` with ``x`` twice the wavenumber times the cell
    half-length (essentially zero for a long cell), while the
    Maxwell-Boltzmann velocity average of each Doppler-shifted
    Lorentzian is a Faddeeva function of the scaled complex detuning.
    """
    zeta = (detuning + 0.5j * gamma) / doppler_width
    sinc = math.sin(two_k_lz) / two_k_lz if two_k_lz != 0.0 else 1.0
    return -(1.0 - sinc) * 2.0 * math.sqrt(math.pi) * faddeeva(zeta) \
        / doppler_width


def _level_table(cfg: OpticalConfig,
                 aux_levels: Sequence[AuxLevel]):
    """(detuning, linewidth, cavity fraction, drive fraction) per level."""
    rows = [(cfg.detuning, cfg.gamma, 1.0, 1.0)]
    for aux in aux_levels:
        gamma = aux.gamma if aux.gamma > 0 else cfg.gamma
        rows.append((cfg.detuning - aux.delta_offset, gamma,
                     aux.g_frac, aux.omega_frac))
    return rows


def transverse_mode_overlap(cfg: OpticalConfig, cell: CellConfig) -> float:
    """Cross-section average of the squared Gaussian beam envelope.

    The drive and cavity envelopes share one waist, so every coupling
    product carries ``exp(-2 r^2 / w^2)``; averaging over the square
    cross section (waist well inside the walls) gives ``pi w^2 / (8 L^2)``.
    """
    return math.pi * cfg.waist_w ** 2 / (8.0 * cell.half_width_L ** 2)


def mean_couplings(cfg: OpticalConfig, cell: CellConfig,
                   species: SpeciesConstants, n_real_atoms: float,
                   omega_drive: float, *,
                   aux_levels: Sequence[AuxLevel] = ()) -> ReadoutCouplings:
    """Motion-averaged coefficients of the retrieval equations.

    Averages the per-atom coefficients over uniform position and
    Maxwell-Boltzmann velocity.  ``cfg.g_amp`` is the single-atom
    cavity coupling on the main transition and ``omega_drive`` the
    drive amplitude; auxiliary levels contribute with their relative
    coupling fractions at their shifted detunings.  The configured
    cavity detuning adds an imaginary part to the cavity self-coupling
    and is what the optimizer uses to cancel the dispersive shift of
    the extra levels.
    """
    if n_real_atoms <= 0:
        raise ValueError("n_real_atoms must be > 0")
    if omega_drive < 0:
        raise ValueError("omega_drive must be >= 0")
    overlap = transverse_mode_overlap(cfg, cell)
    two_k_lz = 2.0 * cfg.k_c * cell.half_length_Lz
    sum_gg = 0.0 + 0.0j   # cavity x cavity
    sum_go = 0.0 + 0.0j   # cavity x drive
    sum_oo = 0.0 + 0.0j   # drive x drive
    for detuning, gamma, g_frac, o_frac in _level_table(cfg, aux_levels):
        line = _mean_line_factor(detuning, gamma, species.doppler_width,
                                 two_k_lz)
        sum_gg += g_frac * g_frac * line
        sum_go += g_frac * o_frac * line
        sum_oo += o_frac * o_frac * line
    g = cfg.g_amp
    a_bar = (-0.5 * cfg.kappa1 + 1j * cfg.cavity_detuning
             + 0.25 * n_real_atoms * g * g * overlap * sum_gg)
    b_bar = 0.125 * g * omega_drive * overlap * sum_go
    c_bar = 0.0625 * omega_drive ** 2 * overlap * sum_oo
    d_disc = (c_bar - a_bar) ** 2 + 4.0 * n_real_atoms * b_bar ** 2
    root = cmath.sqrt(d_disc)
    gamma_read = 0.5 * (a_bar + c_bar + root)
    return ReadoutCouplings(a_bar=a_bar, b_bar=b_bar, c_bar=c_bar,
                            d_disc=d_disc, gamma_read=gamma_read,
                            n_atoms=float(n_real_atoms), kappa1=cfg.kappa1,
                            omega_drive=float(omega_drive), g_amp=float(g))


def coupling_amplitude_for_depth(depth: float, cfg: OpticalConfig,
                                 cell: CellConfig,
                                 species: SpeciesConstants,
                                 n_real_atoms: float, *,
                                 aux_levels: Sequence[AuxLevel] = ()) -> float:
    """Single-atom cavity coupling that reproduces a resonant depth.

    Inverts the far-detuned relation (resonant depth) = (round-trip
    time) x (collective coupling rate) / (linewidth), splitting the
    total coupling between the main and auxiliary cavity transitions
    according to their squared coupling fractions.
    """
    if depth <= 0:
        raise ValueError("depth must be > 0")
    main_share = 1.0 / (1.0 + sum(a.g_frac ** 2 for a in aux_levels))
    overlap = transverse_mode_overlap(cfg, cell)
    n_g_sq = main_share * depth * cfg.gamma / (cfg.tau_cav * overlap)
    return math.sqrt(n_g_sq / n_real_atoms)


# ---------------------------------------------------------------------------
# Zeroth-order retrieval efficiency.
# ---------------------------------------------------------------------------


def _as_kappa2(kappa2) -> float:
    if kappa2 is None:
        return math.inf
    kappa2 = float(kappa2)
    if not kappa2 > 0:
        raise ValueError("kappa2 must be > 0 (or None/inf for no filter)")
    return kappa2


def _gauss_nodes(a: float, b: float, n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def _filtered_pair_integral(g1: complex, g2: complex, kappa2: float,
                            tau: float, center: float = 0.0) -> complex:
    """Overlap of two filtered decaying modes over the pulse.

    Integrates ``conj(M2(t)) M1(t)`` over ``[0, tau]`` where ``M(t)``
    is the response of a filter cavity with pole ``p = i*center -
    kappa2/2``: ``(kappa2/2) int_0^t e^{p (t-t')} e^{g t'} dt'`` (the
    limit without filter is ``e^{g t}``).  ``center`` is the filter's
    angular frequency in the frame of the mode exponents.  All
    exponents in the expansion have nonpositive real part, so the
    closed form is overflow-free; near-degeneracy of a mode with the
    filter pole falls back to quadrature of the stable product form.
    """
    if math.isinf(kappa2):
        return tau * complex(_kernels.phi1((g1 + np.conj(g2)) * tau))
    half = 0.5 * kappa2
    pole = 1j * center - half
    z1 = g1 - pole
    z2 = np.conj(g2) - np.conj(pole)
    if min(abs(z1), abs(z2)) > 1e-9 * kappa2:
        t1 = tau * _kernels.phi1((g1 + np.conj(g2)) * tau)
        t2 = tau * _kernels.phi1((g1 + np.conj(pole)) * tau)
        t3 = tau * _kernels.phi1((pole + np.conj(g2)) * tau)
        t4 = tau * _kernels.phi1(-kappa2 * tau)
        return complex((half * half) * (t1 - t2 - t3 + t4) / (z1 * z2))

    def mode(z, p, t):
        # (kappa2/2)(e^{(z + p) t} - e^{p t})/z, with the removable
        # z -> 0 limit expressed through phi1.
        zt = z * t
        if abs(z) * tau < 1e-8 * kappa2:
            return half * t * np.exp(p * t) * _kernels.phi1(zt)
        return half * (np.exp((z + p) * t) - np.exp(p * t)) / z

    # conj(M(g2, t)) is M evaluated with the conjugated pole pair.
    t_break = min(0.5 * tau, 30.0 / kappa2)
    total = 0.0 + 0.0j
    for lo, hi, n in ((0.0, t_break, 96), (t_break, tau, 128)):
        if hi <= lo:
            continue
        t, w = _gauss_nodes(lo, hi, n)
        total += np.sum(w * mode(z1, pole, t) * mode(z2, np.conj(pole), t))
    return complex(total)


def eta_read_zeroth(couplings: ReadoutCouplings, kappa2,
                    tau_read: float, *,
                    filter_detuning: float = 0.0) -> float:
    """Retrieval efficiency of the averaged system through the filter.

    The retrieved cavity field is a difference of the two mode
    exponentials; the filter cavity (linewidth ``kappa2``; ``None`` or
    ``inf`` disables it) convolves each, and the efficiency is the
    output-photon integral over the pulse.  The filter is locked to the
    retrieved photon's center frequency (the slow mode's oscillation
    frequency, which the collective coupling pulls away from the bare
    cavity line); ``filter_detuning`` offsets it from that lock point.
    Fully closed-form except for a degenerate filter/mode fallback.
    """
    if not tau_read > 0:
        raise ValueError("tau_read must be > 0")
    kappa2 = _as_kappa2(kappa2)
    root = couplings.branch_root
    if abs(root) == 0.0:
        raise NumericError("degenerate retrieval eigenvalues; the "
                           "difference-mode normal form is singular")
    amp = couplings.n_atoms * abs(couplings.b_bar) ** 2 / abs(root) ** 2
    modes = (couplings.gamma_slow, couplings.gamma_fast)
    center = couplings.gamma_slow.imag + filter_detuning
    signs = (1.0, -1.0)
    total = 0.0
    for s1, g1 in zip(signs, modes):
        for s2, g2 in zip(signs, modes):
            total += s1 * s2 * (_filtered_pair_integral(
                g1, g2, kappa2, tau_read, center)).real
    return couplings.kappa1 * amp * total


def eta_read_limit(couplings: ReadoutCouplings) -> float:
    """Drive-independent long-pulse, no-filter efficiency limit.

    Algebraic limit of the zeroth-order efficiency for a weak drive and
    an unfiltered output: the branching of the stored excitation
    between the cavity output channel and all other losses, expressed
    through the main-transition collective coupling recovered from the
    mean coefficients.
    """
    if couplings.c_bar == 0:
        raise ValueError("weak-drive limit needs a nonzero drive "
                         "(the ratio b_bar^2/c_bar recovers the "
                         "collective coupling)")
    u_main = 2.0 * couplings.n_atoms * couplings.b_bar ** 2 / couplings.c_bar
    denom = 2.0 * (u_main * (u_main - 2.0 * couplings.a_bar)
                   * np.conj(couplings.a_bar)).real
    return couplings.kappa1 * abs(u_main) ** 2 / denom


def implied_cooperativity(couplings: ReadoutCouplings) -> float:
    """Cooperativity implied by the averaged couplings.

    Defined so the weak-drive efficiency limit equals C/(1+C); for a
    far-detuned two-level system without cavity detuning it approaches
    (resonant depth x finesse)/pi.
    """
    eta = eta_read_limit(couplings)
    return eta / (1.0 - eta)


def eta_from_depth_finesse(depth: float, finesse: float) -> float:
    """Ideal long-pulse retrieval efficiency for a given depth-finesse
    product: 1 / (pi/(depth*finesse) + 1)."""
    if depth <= 0 or finesse <= 0:
        raise ValueError("depth and finesse must be > 0")
    return 1.0 / (math.pi / (depth * finesse) + 1.0)


# ---------------------------------------------------------------------------
# Coupling-fluctuation correlations from trajectories.
# ---------------------------------------------------------------------------


def _slow_line_factor(v_z: np.ndarray, detuning: float, gamma: float,
                      k: float) -> np.ndarray:
    """Velocity part of the line-shape factor with the standing-wave
    phases dropped.

    The retained terms carry the full Doppler dependence; the dropped
    ones oscillate at twice the optical wavenumber along the atom's
    flight and decorrelate within the inverse Doppler width, far below
    the trajectory sampling grid (their integrated weight in the lag
    kernels is smaller by that ratio).
    """
    return -(1.0 / (0.5 * gamma - 1j * (detuning - k * v_z))
             + 1.0 / (0.5 * gamma - 1j * (detuning + k * v_z)))


def _atom_fluct_series(traj: Trajectory, cfg: OpticalConfig,
                       species: SpeciesConstants,
                       levels, lag_step: int, include_fast_phase: bool):
    """Unit-amplitude spin-cavity and spin-self coupling series."""
    pos = traj.positions[::lag_step]
    vel = traj.velocities[::lag_step]
    env = np.exp(-2.0 * (pos[:, 0] ** 2 + pos[:, 1] ** 2)
                 / cfg.waist_w ** 2)
    pb = np.zeros(env.shape[0], dtype=complex)
    pc = np.zeros(env.shape[0], dtype=complex)
    for detuning, gamma, g_frac, o_frac in levels:
        if include_fast_phase:
            level_cfg = replace(cfg, detuning=detuning, gamma=gamma)
            line = eval_z_factor(pos[:, 2], vel[:, 2], level_cfg, species)
        else:
            line = _slow_line_factor(vel[:, 2], detuning, gamma, cfg.k_c)
        pb += (g_frac * o_frac) * line
        pc += (o_frac * o_frac) * line
    return env * pb, env * pc


def estimate_fluctuations(trajectories: Sequence[Trajectory],
                          cfg: OpticalConfig,
                          species: SpeciesConstants,
                          s_max: float | None = None,
                          lag_step: int = DEFAULT_LAG_STEP,
                          threads: int = 1, *,
                          aux_levels: Sequence[AuxLevel] = (),
                          include_fast_phase: bool = False
                          ) -> FluctuationCorrelations:
    """Estimate the retrieval coupling-fluctuation correlations.

    Builds, per atom, the spin-cavity and spin-self coupling series
    along the trajectory, removes the global ensemble mean, and forms
    plain and conjugated lagged product means (see
    :class:`FluctuationCorrelations` for the time-order conventions).
    The returned series carry the physical amplitudes from
    ``cfg.g_amp`` / ``cfg.omega_amp`` and the fixed numeric
    coefficients of the mode equations.

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
    times = trajectories[0].sample_times
    dt = float(times[1] - times[0])
    duration = float(times[-1])
    ds = lag_step * dt
    v_thermal = species.doppler_width / cfg.k_c
    if s_max is None:
        # Same resolution convention as the write-stage estimator:
        # five decay times of the transit-rate guess 1.3 v / w.
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
    levels = _level_table(cfg, aux_levels)

    # Pass 1: global ensemble means of the two coupling series.
    sum_b = np.zeros(n_atoms, dtype=complex)
    sum_c = np.zeros(n_atoms, dtype=complex)

    def mean_work(i: int) -> None:
        pb, pc = _atom_fluct_series(trajectories[i], cfg, species, levels,
                                    lag_step, include_fast_phase)
        sum_b[i] = pb.mean()
        sum_c[i] = pc.mean()

    def run(fn) -> None:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(fn, range(n_atoms)))
        else:
            for i in range(n_atoms):
                fn(i)

    run(mean_work)
    mu_b = sum_b.mean()
    mu_c = sum_c.mean()

    # Pass 2: centered lagged products, plain and conjugated.
    per_atom = np.empty((n_atoms, 8, n_lags), dtype=complex)

    def corr_work(i: int) -> None:
        pb, pc = _atom_fluct_series(trajectories[i], cfg, species, levels,
                                    lag_step, include_fast_phase)
        db = pb - mu_b
        dc = pc - mu_c
        # Plain rows: first-named factor at the later time.
        per_atom[i, 0] = lagged_mean_products(db, db, n_lags,
                                              conjugate_first=False)
        per_atom[i, 1] = lagged_mean_products(dc, db, n_lags,
                                              conjugate_first=False)
        per_atom[i, 2] = lagged_mean_products(db, dc, n_lags,
                                              conjugate_first=False)
        per_atom[i, 3] = lagged_mean_products(dc, dc, n_lags,
                                              conjugate_first=False)
        # Conjugated rows: conjugated factor at the earlier time.
        per_atom[i, 4] = lagged_mean_products(db, db, n_lags,
                                              conjugate_first=True)
        per_atom[i, 5] = lagged_mean_products(db, dc, n_lags,
                                              conjugate_first=True)
        per_atom[i, 6] = lagged_mean_products(dc, db, n_lags,
                                              conjugate_first=True)
        per_atom[i, 7] = lagged_mean_products(dc, dc, n_lags,
                                              conjugate_first=True)

    run(corr_work)

    factor_b = cfg.g_amp * cfg.omega_amp / 8.0
    factor_c = cfg.omega_amp ** 2 / 16.0
    row_scale = np.array([factor_b * factor_b, factor_b * factor_c,
                          factor_b * factor_c, factor_c * factor_c])
    scale8 = np.concatenate([row_scale, row_scale])[None, :, None]
    per_atom *= scale8
    values = per_atom.mean(axis=0)
    if n_atoms >= 2:
        var = (per_atom.real.var(axis=0, ddof=1)
               + per_atom.imag.var(axis=0, ddof=1))
        stderr = np.sqrt(var / n_atoms)
    else:
        stderr = np.full((8, n_lags), np.inf)
    lags = np.arange(n_lags) * ds
    return FluctuationCorrelations(
        lags=lags,
        plain=values[:4],
        conjugated=values[4:],
        stderr_plain=stderr[:4],
        stderr_conjugated=stderr[4:],
        n_samples=pairs_at_deepest,
        g_amp=cfg.g_amp,
        omega_amp=cfg.omega_amp,
    )


# ---------------------------------------------------------------------------
# Second-order correction.
# ---------------------------------------------------------------------------


def second_order_parts(couplings: ReadoutCouplings,
                       fluct: FluctuationCorrelations,
                       tau_read: float) -> dict[str, float]:
    """Per-series contributions to the second-order correction.

    Contracts each lag kernel against its fluctuation series by
    trapezoidal quadrature over the measured lag grid (the series decay
    well inside the grid, so the cutoff is benign).  Keys are ``bb``,
    ``bc``, ``cb``, ``cc``.
    """
    if not tau_read > 0:
        raise ValueError("tau_read must be > 0")
    lags = fluct.lags
    mask = lags <= min(tau_read, lags[-1])
    s = lags[mask]
    kernels = _kernels.readout_second_kernels(
        tau_read, s, couplings.a_bar, couplings.b_bar, couplings.c_bar,
        couplings.n_atoms, couplings.kappa1)
    names = ("bb", "bc", "cb", "cc")
    out = {}
    for name, kernel, series in zip(names, kernels, fluct.plain):
        out[name] = float(np.trapezoid(kernel * series[mask], s).real)
    return out


def second_order_term(couplings: ReadoutCouplings,
                      fluct: FluctuationCorrelations,
                      tau_read: float, *,
                      validate_kernel: bool = False) -> float:
    """Second-order efficiency correction (negative: motional loss)."""
    if validate_kernel:
        validate_readout_kernels(couplings, tau_read)
    return sum(second_order_parts(couplings, fluct, tau_read).values())


def eta_read_second(couplings: ReadoutCouplings,
                    fluct: FluctuationCorrelations, kappa2,
                    tau_read: float, *,
                    validate_kernel: bool = False) -> float:
    """Retrieval efficiency to second order in coupling fluctuations.

    Sum of the filtered zeroth-order efficiency and the second-order
    correction.  The correction's lag kernels are derived without the
    downstream filter (their support is set by the much slower
    retrieval envelope), so the filter enters through the zeroth-order
    term only.
    """
    eta0 = eta_read_zeroth(couplings, kappa2, tau_read)
    eta2 = second_order_term(couplings, fluct, tau_read,
                             validate_kernel=validate_kernel)
    return eta0 + eta2


def _readout_kernel_quadrature(tau: float, s: float,
                               couplings: ReadoutCouplings,
                               n_nodes: int = 800) -> np.ndarray:
    """Gauss-Legendre oracle for the four second-order lag kernels.

    Integrates the defining double time integral directly from the
    perturbative solution, independent of the analytic ``t``/``u``
    integration in :func:`motavg._kernels.readout_second_kernels`.  The
    six exponential groups are evaluated with fully folded exponents
    (every combined exponent is bounded on the domain even though
    individual factors overflow).  Both time variables are split at the
    fast-branch boundary layer so the damped oscillatory pieces are
    resolved.
    """
    a = couplings.a_bar
    b = couplings.b_bar
    c = couplings.c_bar
    n = couplings.n_atoms
    disc = (c - a) ** 2 + 4.0 * n * b ** 2
    big_s = cmath.sqrt(disc)
    sqn_b = math.sqrt(n) * b / big_s
    g_plus = (a - c + big_s) / (2.0 * big_s)
    g_minus = (a - c - big_s) / (2.0 * big_s)
    gbar_plus = (-a + c + big_s) / (2.0 * big_s)
    gbar_minus = (-a + c - big_s) / (2.0 * big_s)
    pref = 2.0 * couplings.kappa1 * math.sqrt(n) * np.conj(b) \
        / (2.0 * abs(disc))
    beta = 0.5 * (c - a)
    r_decay = (a + c).real
    # Width of the fast-branch transient; past it the oscillatory
    # exponentials are damped below double precision.
    layer = 80.0 / abs(big_s.real) if big_s.real != 0.0 else tau
    t_break = min(s + layer, tau)
    x, wx = np.polynomial.legendre.leggauss(n_nodes)

    h = np.zeros(4, dtype=complex)
    outer_segs = [(s, t_break)]
    if t_break < tau:
        outer_segs.append((t_break, tau))
    for lo_t, hi_t in outer_segs:
        if hi_t <= lo_t:
            continue
        t, wt = _gauss_nodes(lo_t, hi_t, n_nodes)
        inner_break = np.minimum(s + layer, t)
        for lo_row, hi_row in ((np.full_like(t, s), inner_break),
                               (inner_break, t)):
            span = hi_row - lo_row
            if np.all(span <= 0.0):
                continue
            tp = lo_row[:, None] + 0.5 * span[:, None] * (x[None, :] + 1.0)
            w2d = (wt[:, None] * 0.5 * span[:, None]) * wx[None, :]
            u = 2.0 * tp - s
            tt = np.broadcast_to(t[:, None], tp.shape)
            for sigma0 in (+1.0, -1.0):
                mu0 = r_decay + sigma0 * 0.5 * np.conj(big_s)
                base = mu0 * tt + beta * s

                def grp(ct, cs, cu):
                    return np.exp(base + 0.5 * big_s
                                  * (ct * tt + cs * s + cu * u))

                w_t_ms = np.sum(w2d * grp(1.0, -1.0, 0.0))
                w_t_mu = np.sum(w2d * grp(1.0, 0.0, -1.0))
                w_mt_u = np.sum(w2d * grp(-1.0, 0.0, 1.0))
                w_mt_s = np.sum(w2d * grp(-1.0, 1.0, 0.0))
                h[0] += pref * sigma0 * (
                    (w_t_ms - w_t_mu) * (a - c + big_s)
                    + (w_mt_s - w_mt_u) * (a - c - big_s)) * sqn_b * n
                h[2] += pref * sigma0 * (w_t_ms - w_t_mu
                                         + w_mt_s - w_mt_u) \
                    * 2.0 * b * sqn_b * n
                h[1] += pref * sigma0 * math.sqrt(n) * (
                    (a - c + big_s) * (w_t_ms * gbar_plus
                                       + w_t_mu * g_plus)
                    + (a - c - big_s) * (w_mt_u * g_minus
                                        + w_mt_s * gbar_minus))
                h[3] += pref * sigma0 * 2.0 * math.sqrt(n) * b * (
                    w_t_ms * gbar_plus + w_t_mu * g_plus
                    + w_mt_u * g_minus + w_mt_s * gbar_minus)
    return h


def validate_readout_kernels(couplings: ReadoutCouplings, tau_read: float,
                             *, n_points: int = 20, rtol: float = 1e-6,
                             seed: int = 0) -> float:
    """Check the closed-form lag kernels against the quadrature oracle.

    Samples random lags across the kernel support and compares all four
    kernels pointwise.  Returns the worst relative error (normalized by
    the largest kernel magnitude at that lag) and raises
    :class:`KernelValidationError` beyond ``rtol``.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_at = 0.0
    for _ in range(n_points):
        s = float(rng.uniform(0.0, 0.6) * tau_read)
        closed = np.array(_kernels.readout_second_kernels(
            tau_read, np.array([s]), couplings.a_bar, couplings.b_bar,
            couplings.c_bar, couplings.n_atoms, couplings.kappa1))[:, 0]
        oracle = _readout_kernel_quadrature(tau_read, s, couplings)
        scale = np.max(np.abs(oracle))
        if scale == 0.0:
            continue
        rel = float(np.max(np.abs(closed - oracle)) / scale)
        if rel > worst:
            worst = rel
            worst_at = s
    if worst > rtol:
        raise KernelValidationError(
            f"retrieval lag kernels disagree with the quadrature oracle: "
            f"relative error {worst:.3e} at lag {worst_at:.6g} s "
            f"(tolerance {rtol:.1e})")
    return worst


# ---------------------------------------------------------------------------
# Incoherent-photon probability.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IncoherentResult:
    """Probability of retrieving a photon from wrongly prepared atoms."""

    p1: float
    p1_over_epsilon: float


def _stable_exp_integral(e_hi, e_lo, mu, span):
    """int_0^span e^{e_lo + mu x} dx given e_hi = e_lo + mu*span.

    Both endpoint exponents have nonpositive real part by construction,
    so the difference form is overflow-free; the degenerate |mu*span|
    branch uses the linear-ramp limit.
    """
    small = np.abs(mu) * span < 1e-8
    mu_safe = np.where(small, 1.0, mu)
    out = (np.exp(e_hi) - np.exp(e_lo)) / mu_safe
    if np.any(small):
        # Mask mu before phi1 so the untaken branch never sees a large
        # positive exponent.
        ramp = np.exp(e_lo) * span * _kernels.phi1(np.where(small, mu, 0.0) * span)
        out = np.where(small, ramp, out)
    return out


def p1_incoherent(couplings: ReadoutCouplings,
                  fluct: FluctuationCorrelations, kappa2,
                  tau_read: float, epsilon: float, *,
                  n_time_nodes: tuple[int, int] = (64, 96)
                  ) -> IncoherentResult:
    """Probability of an incoherent photon from wrongly prepared atoms.

    A fraction ``epsilon`` of atoms sits in the readout state without
    belonging to the stored collective mode.  Each such atom overlaps
    the collective mode with amplitude ``1/sqrt(N)``, so the mean
    dynamics retrieves a fraction ``epsilon`` of their population with
    the zeroth-order efficiency; the orthogonal remainder couples out
    only through the atom's fluctuating couplings.  That second piece
    is a convolution of two response kernels (spin-cavity and
    spin-self) against the single-atom coupling fluctuations; after the
    filter cavity, the photon probability contracts the conjugated
    fluctuation correlations with closed-form double-filter overlaps,
    leaving one smooth time quadrature.  The result is exactly linear
    in ``epsilon``.
    """
    if not 0.0 <= epsilon <= 0.1:
        raise ValueError("epsilon must lie in [0, 0.1]")
    if not tau_read > 0:
        raise ValueError("tau_read must be > 0")
    kappa2 = _as_kappa2(kappa2)
    a = couplings.a_bar
    c = couplings.c_bar
    root = couplings.branch_root
    if abs(root) == 0.0:
        raise NumericError("degenerate retrieval eigenvalues")
    g_slow = couplings.gamma_slow
    g_fast = couplings.gamma_fast
    sqn_b = couplings.b_bar / root  # per-atom; sqrt(N) enters via weights

    # Response-kernel coefficients on the two eigenmodes: spin-cavity
    # row and spin-self row of the perturbative solution.
    coef = {
        "b": {g_slow: (a - c + root) / (2.0 * root),
              g_fast: (root - a + c) / (2.0 * root)},
        "c": {g_slow: couplings.b_bar / root,
              g_fast: -couplings.b_bar / root},
    }
    # Filtered mode table: exponent rate and constant coefficient of
    # each sigma-exponential e^{(c_bar - rate) sigma} ... e^{rate t}.
    # The filter cavity is locked to the retrieved photon's center
    # frequency, i.e. its pole sits at i Im(gamma_slow) - kappa2/2.
    finite = not math.isinf(kappa2)
    half = 0.5 * kappa2 if finite else 0.0
    pole = 1j * g_slow.imag - half

    def mode_list(flavor):
        rows = []
        leak = 0.0 + 0.0j
        for rate, cf in coef[flavor].items():
            if finite:
                z = rate - pole
                if abs(z) < 1e-12 * kappa2:
                    raise NumericError(
                        "filter linewidth degenerate with a retrieval "
                        "eigenvalue; perturb kappa2")
                q = half / z
            else:
                q = 1.0
            rows.append((cf * q, rate))
            leak -= cf * q if finite else 0.0
        if finite:
            rows.append((leak, pole))
        return rows

    modes_b = mode_list("b")
    modes_c = mode_list("c")

    lags = fluct.lags
    n_lags = lags.shape[0]
    if n_lags < 2:
        raise InsufficientDataError("need at least two lag points")
    # Trapezoid weights on the lag grid; the symmetric double integral
    # is folded onto s >= 0 with twice the real part, which gives the
    # zero-lag diagonal exactly its half weight.
    wl = np.empty(n_lags)
    wl[1:-1] = 0.5 * (lags[2:] - lags[:-2])
    wl[0] = 0.5 * (lags[1] - lags[0])
    wl[-1] = 0.5 * (lags[-1] - lags[-2])

    series = {("b", "b"): fluct.bb_conj, ("b", "c"): fluct.bc_conj,
              ("c", "b"): fluct.cb_conj, ("c", "c"): fluct.cc_conj}
    flavors = {"b": modes_b, "c": modes_c}

    t_break = min(0.5 * tau_read,
                  60.0 / couplings.kappa1 + (60.0 / kappa2 if finite
                                             else 0.0))
    slope = 0.0
    for lo, hi, n in ((0.0, t_break, n_time_nodes[0]),
                      (t_break, tau_read, n_time_nodes[1])):
        if hi <= lo:
            continue
        t, wt = _gauss_nodes(lo, hi, n)
        t2 = t[:, None]                  # (nt, 1)
        s2 = lags[None, :]               # (1, ns)
        span = t2 - s2                   # sigma-integration length
        valid = span > 0.0
        span_safe = np.where(valid, span, 0.0)
        inner = np.zeros(t.shape[0])
        for (fx, fy), corr in series.items():
            gxy = np.zeros((t.shape[0], n_lags), dtype=complex)
            for k_m, r_m in flavors[fx]:
                for k_n, r_n in flavors[fy]:
                    mu = np.conj(couplings.c_bar - r_m) \
                        + (couplings.c_bar - r_n)
                    # Exponent of the integrand at sigma = 0 and at
                    # sigma = span; both have Re <= 0 identically.
                    e_lo = np.conj(r_m) * t2 + r_n * t2 \
                        + (couplings.c_bar - r_n) * s2
                    e_hi = e_lo + mu * span_safe
                    gxy += np.conj(k_m) * k_n * _stable_exp_integral(
                        e_hi, e_lo, mu, span_safe)
            gxy = np.where(valid, gxy, 0.0)
            inner += 2.0 * np.sum((wl[None, :] * corr[None, :])
                                  * gxy, axis=1).real
        slope += float(np.sum(wt * inner))
    slope *= (couplings.n_atoms - 1.0) * couplings.kappa1
    slope += eta_read_zeroth(couplings, kappa2, tau_read)
    return IncoherentResult(p1=epsilon * slope, p1_over_epsilon=slope)


# ---------------------------------------------------------------------------
# Drive calibration and optimizer.
# ---------------------------------------------------------------------------


def drive_for_readout_rate(cfg: OpticalConfig, cell: CellConfig,
                           species: SpeciesConstants, n_real_atoms: float,
                           rate_target: float, *,
                           aux_levels: Sequence[AuxLevel] = (),
                           omega_init: float = 1e6,
                           max_iter: int = 80
                           ) -> tuple[float, ReadoutCouplings]:
    """Drive amplitude whose averaged retrieval rate hits a target.

    The rate is quadratic in the drive to excellent accuracy in the
    stable regime, so a rescaling fixed point converges in a few
    steps; convergence to 1e-12 relative is enforced.
    """
    if rate_target <= 0:
        raise ValueError("rate_target must be > 0")
    omega = float(omega_init)
    last = None
    for _ in range(max_iter):
        coup = mean_couplings(cfg, cell, species, n_real_atoms, omega,
                              aux_levels=aux_levels)
        rate = coup.readout_rate
        if rate <= 0:
            raise NumericError(
                "averaged retrieval rate is not decaying at drive "
                f"{omega:.3g}; the collective gain exceeds the damping")
        # The rate comes out of a near-cancellation of rad/s-scale
        # eigenvalue parts, so its floating-point floor can sit well
        # above 1e-12 relative for slow readouts.
        if abs(rate - rate_target) <= 1e-9 * rate_target:
            return omega, coup
        omega *= math.sqrt(rate_target / rate)
        last = rate
    raise NumericError(
        f"drive calibration did not converge (last rate {last:.6g}, "
        f"target {rate_target:.6g})")


@dataclass
class ReadoutOptimum:
    """Result of the finesse / cavity-detuning search."""

    finesse: float
    cavity_detuning: float
    omega_drive: float
    eta_read: float
    eta_zeroth: float
    eta_second: float
    couplings: ReadoutCouplings
    branch_warning: bool = False


def _aux_dispersive_shift(cfg: OpticalConfig, cell: CellConfig,
                          species: SpeciesConstants, n_real_atoms: float,
                          g_amp: float,
                          aux_levels: Sequence[AuxLevel]) -> complex:
    """Collective frequency pull of the auxiliary levels (twice the
    cavity self-coupling contribution), used to seed the compensating
    cavity detuning."""
    overlap = transverse_mode_overlap(cfg, cell)
    two_k_lz = 2.0 * cfg.k_c * cell.half_length_Lz
    total = 0.0 + 0.0j
    for aux in aux_levels:
        gamma = aux.gamma if aux.gamma > 0 else cfg.gamma
        line = _mean_line_factor(cfg.detuning - aux.delta_offset, gamma,
                                 species.doppler_width, two_k_lz)
        total += aux.g_frac ** 2 * line
    return 0.5 * n_real_atoms * g_amp ** 2 * overlap * total


def optimize_readout(cfg: OpticalConfig, cell: CellConfig,
                     species: SpeciesConstants,
                     fluct: FluctuationCorrelations, *,
                     depth: float, kappa2, tau_read: float,
                     tau_target_multiplier: float = DEFAULT_TAU_MULTIPLIER,
                     finesse_bounds: tuple[float, float] = (20.0, 100.0),
                     n_finesse: int = 9,
                     detuning_values: Sequence[float] | None = None,
                     n_real_atoms: float | None = None,
                     aux_levels: Sequence[AuxLevel] = CS_READOUT_AUX_LEVELS,
                     threads: int = 1) -> ReadoutOptimum:
    """Maximize the second-order retrieval efficiency at fixed pulse.

    For each finesse candidate the input-mirror rate follows from the
    fixed round-trip time, the single-atom coupling from the target
    depth, and the drive amplitude is calibrated so the retrieval rate
    times the pulse length equals ``tau_target_multiplier``.  A coarse
    grid over finesse and cavity detuning (seeded at the auxiliary-level
    compensation value) is followed by one local refinement pass.
    ``fluct`` should be estimated at unit amplitudes; it is rescaled
    per candidate.
    """
    if not tau_read > 0:
        raise ValueError("tau_read must be > 0")
    lo, hi = finesse_bounds
    if not (0 < lo <= hi):
        raise ValueError("bad finesse bounds")
    tau_rt = cfg.tau_cav  # fixed round-trip time of the input geometry
    if n_real_atoms is None:
        n_real_atoms = atoms_for_depth(depth, cell, species,
                                       2.0 * math.pi / cfg.k_q)
    rate_target = tau_target_multiplier / tau_read

    base_g = coupling_amplitude_for_depth(
        depth, cfg, cell, species, n_real_atoms, aux_levels=aux_levels)

    if detuning_values is None:
        pull = _aux_dispersive_shift(cfg, cell, species, n_real_atoms,
                                     base_g, aux_levels)
        seed = -0.5 * pull.imag
        if seed == 0.0:
            detuning_values = [0.0]
        else:
            # The best compensation migrates well below the raw seed at
            # high finesse and the peak narrows with the cavity
            # linewidth, so span the range uniformly and finely enough
            # to land on the narrowest peak.
            detuning_values = list(np.linspace(0.0, 1.6 * seed, 17))
    detuning_values = list(detuning_values)
    if n_finesse < 1:
        raise ValueError("n_finesse must be >= 1")
    finesse_values = list(np.linspace(lo, hi, n_finesse)) \
        if n_finesse > 1 else [0.5 * (lo + hi)]

    def evaluate(fin: float, det: float) -> ReadoutOptimum:
        kappa1 = 2.0 * math.pi / (tau_rt * fin)
        cand = replace(cfg, kappa1=kappa1, finesse=fin,
                       cavity_detuning=det, g_amp=base_g)
        omega, coup = drive_for_readout_rate(
            cand, cell, species, n_real_atoms, rate_target,
            aux_levels=aux_levels)
        scaled = fluct.with_amplitudes(base_g, omega)
        eta0 = eta_read_zeroth(coup, kappa2, tau_read)
        eta2 = second_order_term(coup, scaled, tau_read)
        return ReadoutOptimum(finesse=fin, cavity_detuning=det,
                              omega_drive=omega, eta_read=eta0 + eta2,
                              eta_zeroth=eta0, eta_second=eta2,
                              couplings=coup)

    def search(grid: list[tuple[float, float]]) -> list[ReadoutOptimum]:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(lambda fd: evaluate(*fd), grid))
        return [evaluate(*fd) for fd in grid]

    coarse_grid = [(f, d) for f in finesse_values for d in detuning_values]
    results = search(coarse_grid)

    # Branch-continuity audit along the finesse axis at each detuning.
    branch_warning = False
    by_det: dict[float, list[ReadoutOptimum]] = {}
    for res in results:
        by_det.setdefault(res.cavity_detuning, []).append(res)
    for group in by_det.values():
        group.sort(key=lambda r: r.finesse)
        for prev, cur in zip(group, group[1:]):
            r0 = prev.couplings.branch_root
            r1 = cur.couplings.branch_root
            if abs(r1 - r0) > abs(r1 + r0):
                branch_warning = True

    best = max(results, key=lambda r: r.eta_read)

    # One local refinement around the best coarse point.
    df = (finesse_values[1] - finesse_values[0]) / 2.0 \
        if len(finesse_values) > 1 else 0.0
    dspace = sorted(detuning_values)
    if len(dspace) > 1:
        gaps = [b - a for a, b in zip(dspace, dspace[1:])]
        dd = min(g for g in gaps if g > 0) / 2.0
    else:
        dd = 0.0
    fine_f = {min(max(best.finesse + k * df, lo), hi) for k in (-1, 0, 1)} \
        if df else {best.finesse}
    fine_d = {best.cavity_detuning + k * dd for k in (-1, 0, 1)} \
        if dd else {best.cavity_detuning}
    fine_grid = [(f, d) for f in sorted(fine_f) for d in sorted(fine_d)
                 if (f, d) != (best.finesse, best.cavity_detuning)]
    if fine_grid:
        refined = search(fine_grid)
        best = max([best] + refined, key=lambda r: r.eta_read)
    best.branch_warning = branch_warning
    return best
