"""Physical constants, configuration types and shared spatial coupling profiles.

Unit conventions
----------------
All quantities are SI internally.  Every frequency-like quantity (decay
rates, detunings, splittings, coupling amplitudes) is stored in *angular*
units, rad/s.  Configuration files express frequencies in ordinary Hz and
are multiplied by 2*pi on load unless the file says ``angular = true``
(see :mod:`motavg.config`).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "K_BOLTZMANN",
    "SPEED_OF_LIGHT",
    "ATOMIC_MASS_KG",
    "CS_MASS_KG",
    "CS_D2_WAVELENGTH_M",
    "CS_GROUND_SPLITTING",
    "CS_NATURAL_LINEWIDTH",
    "CS_EXC_SPLIT_45",
    "CS_EXC_SPLIT_35",
    "CS_EXC_SPLIT_34",
    "CS_BRANCH_MAIN_TO_0",
    "CS_BRANCH_AUX_TO_0",
    "CS_BRANCH_QUANTUM",
    "CellConfig",
    "OpticalConfig",
    "SpeciesConstants",
    "coupling_xy",
    "standing_wave",
    "c_delta_k",
    "doppler_width",
    "thermal_speed",
    "cs_d2_species",
]

# CODATA 2018 exact value.
K_BOLTZMANN = 1.380649e-23  # J/K
SPEED_OF_LIGHT = 299792458.0  # m/s
ATOMIC_MASS_KG = 1.66053906892e-27  # kg

# Cesium-133 data (atomic mass, D2 line, ground/excited hyperfine splittings).
CS_MASS_KG = 132.905451931 * ATOMIC_MASS_KG
CS_D2_WAVELENGTH_M = 852.34727582e-9
CS_GROUND_SPLITTING = 2.0 * math.pi * 9.192631770e9  # rad/s (exact, SI second)
CS_NATURAL_LINEWIDTH = 2.0 * math.pi * 5.22e6  # rad/s
# Excited-state (6P_3/2) hyperfine intervals.
CS_EXC_SPLIT_45 = 2.0 * math.pi * 251.0916e6  # F'=4 <-> F'=5
CS_EXC_SPLIT_34 = 2.0 * math.pi * 201.2871e6  # F'=3 <-> F'=4
CS_EXC_SPLIT_35 = CS_EXC_SPLIT_45 + CS_EXC_SPLIT_34

# Angular-momentum branching fractions of the two excited levels reachable
# from the pumped ground state |F=4, m=4>.  The fractions below are exact
# Clebsch-Gordan ratios; they sum with the remaining decay channels to 1:
#   F'=4,m'=4:  7/15 (-> F4m4, pi), 5/12 (-> F3m3, sigma+), 7/60 (-> F4m3)
CS_BRANCH_MAIN_TO_0 = 7.0 / 15.0  # |F'=4,m'=4> -> |F=4,m=4|
CS_BRANCH_AUX_TO_0 = 1.0 / 5.0  # |F'=5,m'=4> -> |F=4,m=4|
CS_BRANCH_QUANTUM = 5.0 / 12.0  # |F'=4,m'=4> -> |F=3,m=3|


def thermal_speed(temperature: float, mass: float) -> float:
    """Most-probable (2kT/m)^(1/2) speed used as the transit-rate scale."""
    return math.sqrt(2.0 * K_BOLTZMANN * temperature / mass)


def doppler_width(temperature: float, mass: float, k: float) -> float:
    """Inhomogeneous linewidth sqrt(2*k_B*T/m) * k, in rad/s."""
    return thermal_speed(temperature, mass) * k


@dataclass(frozen=True)
class CellConfig:
    """Geometry and thermodynamic state of the vapor cell.

    The cell is a box of dimensions ``2L x 2L x 2Lz`` with the long axis
    (``z``) along the cavity.
    """

    half_width_L: float  # m, transverse half-side
    half_length_Lz: float  # m, half-length along the cavity axis
    temperature: float  # K
    atom_mass: float  # kg
    n_atoms: int = 5000  # simulated trajectories
    trap_time: float = 0.0  # s, mean wall-adsorption dwell

    def __post_init__(self) -> None:
        if self.half_width_L <= 0 or self.half_length_Lz <= 0:
            raise ValueError("cell dimensions must be strictly positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be strictly positive")
        if self.atom_mass <= 0:
            raise ValueError("atom_mass must be strictly positive")
        if self.n_atoms < 1:
            raise ValueError("n_atoms must be >= 1")
        if self.trap_time < 0:
            raise ValueError("trap_time must be >= 0")

    @property
    def v_thermal(self) -> float:
        return thermal_speed(self.temperature, self.atom_mass)


@dataclass(frozen=True)
class OpticalConfig:
    """Cavity, beam and drive parameters.

    ``kappa1`` is the (intensity) decay rate of the cavity around the cell
    and ``kappa2`` that of the narrow external filter cavity.  ``k_q`` and
    ``k_c`` are the wavenumbers of the heralding ("quantum") field and the
    classical drive; their difference sets the standing-wave mismatch along
    the cell.
    """

    waist_w: float  # m
    kappa1: float  # rad/s
    kappa2: float  # rad/s
    detuning: float  # rad/s
    gamma: float  # rad/s, excited-state decay
    k_q: float  # 1/m
    k_c: float  # 1/m
    g_amp: float = 1.0  # rad/s, peak single-atom coupling
    omega_amp: float = 1.0  # rad/s, peak drive Rabi frequency
    finesse: float = 17.0  # dimensionless, 2*pi/(tau_cav*kappa1)
    cavity_detuning: float = 0.0  # rad/s, readout compensation shift

    def __post_init__(self) -> None:
        if self.waist_w <= 0:
            raise ValueError("waist_w must be strictly positive")
        if self.kappa1 <= 0 or self.kappa2 <= 0 or self.gamma <= 0:
            raise ValueError("kappa1, kappa2 and gamma must be strictly positive")
        if self.k_q <= 0 or self.k_c <= 0:
            raise ValueError("wavenumbers must be strictly positive")
        if self.finesse <= 0:
            raise ValueError("finesse must be strictly positive")

    @property
    def delta_k(self) -> float:
        """Wavenumber difference between quantum and classical fields."""
        return self.k_q - self.k_c

    @property
    def tau_cav(self) -> float:
        """Cavity roundtrip time implied by finesse and kappa1."""
        return 2.0 * math.pi / (self.finesse * self.kappa1)


@dataclass(frozen=True)
class SpeciesConstants:
    """Atomic-species numbers that the generic model cannot derive.

    ``beta`` is the dipole-strength ratio of the drive transition to the
    heralding transition and ``beta2`` the summed ratio over both excited
    levels reachable by the cavity field; both default to 1 and must be set
    explicitly for quantitative runs.  ``gamma_branch_0`` lists the partial
    decay rate of each cavity-coupled excited level back to the pumped
    ground state.
    """

    doppler_width: float  # rad/s
    hyperfine_splitting: float  # rad/s
    gamma: float = CS_NATURAL_LINEWIDTH  # rad/s, total excited-state decay
    beta: float = 1.0
    beta2: float = 1.0
    gamma_branch_0: tuple[float, ...] = field(default=(1.0,))

    def __post_init__(self) -> None:
        if self.doppler_width <= 0 or self.hyperfine_splitting <= 0:
            raise ValueError("doppler_width and hyperfine_splitting must be > 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.beta <= 0 or self.beta2 <= 0:
            raise ValueError("beta and beta2 must be > 0")
        if not self.gamma_branch_0 or any(g <= 0 for g in self.gamma_branch_0):
            raise ValueError("gamma_branch_0 entries must be > 0")


def cs_d2_species(cell: CellConfig, k: float, gamma: float = CS_NATURAL_LINEWIDTH,
                  beta: float = 1.0, beta2: float = 1.0) -> SpeciesConstants:
    """Cs-D2 species constants consistent with a cell temperature and wavenumber."""
    return SpeciesConstants(
        doppler_width=doppler_width(cell.temperature, cell.atom_mass, k),
        hyperfine_splitting=CS_GROUND_SPLITTING,
        gamma=gamma,
        beta=beta,
        beta2=beta2,
        gamma_branch_0=(CS_BRANCH_MAIN_TO_0 * gamma, CS_BRANCH_AUX_TO_0 * gamma),
    )


def coupling_xy(pos: np.ndarray, cfg: OpticalConfig) -> np.ndarray | float:
    """Transverse Gaussian amplitude profile exp(-(x^2+y^2)/w^2).

    Parameters
    ----------
    pos : array_like, shape (..., 3)
        Position(s) in meters.
    cfg : OpticalConfig

    Returns
    -------
    Dimensionless factor in (0, 1]; multiply by ``g_amp`` or ``omega_amp``
    for the physical coupling amplitude.
    """
    pos = np.asarray(pos, dtype=float)
    r2 = pos[..., 0] ** 2 + pos[..., 1] ** 2
    return np.exp(-r2 / cfg.waist_w**2)


def standing_wave(z: np.ndarray | float, k: float) -> np.ndarray | float:
    """Longitudinal mode profile sin(k*z); both cavity modes share a node at z=0."""
    return np.sin(k * np.asarray(z, dtype=float))


def c_delta_k(delta_k: float, Lz: float) -> float:
    """Mode-overlap efficiency factor <cos(dk*z)>^2 / <cos^2(dk*z)>.

    Averages are over z uniform on [-Lz, Lz]; evaluated in closed form,

        <cos> = sin(dk*Lz)/(dk*Lz),   <cos^2> = (1 + sin(2*dk*Lz)/(2*dk*Lz))/2.

    Continuous at ``delta_k = 0`` where the value is 1.
    """
    if Lz <= 0:
        raise ValueError("Lz must be > 0")
    x = abs(delta_k) * Lz
    if x < 1e-8:
        # Series: <cos>^2 ~ 1 - x^2/3, <cos^2> ~ 1 - x^2/3 for small x.
        return 1.0
    mean_cos = math.sin(x) / x
    mean_cos2 = 0.5 * (1.0 + math.sin(2.0 * x) / (2.0 * x))
    return mean_cos**2 / mean_cos2


def warn_if_beam_clipped(cfg: OpticalConfig, cell: CellConfig) -> None:
    """Warn when the erf(sqrt(2)L/w)^2 ~ 1 truncation becomes questionable."""
    if cfg.waist_w > cell.half_width_L / 1.5:
        warnings.warn(
            "beam waist exceeds 2/3 of the cell half-width; the closed-form "
            "efficiencies neglect the beam fraction outside the cell",
            stacklevel=2,
        )
