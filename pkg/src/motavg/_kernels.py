"""Closed-form integral kernels shared by the write and readout modules.

The efficiency integrals reduce, after analytic integration over the
cavity and collection filter variables, to one-dimensional integrals of
a kernel against the measured coupling-correlation function at lag
``s``.  This module holds those kernels and the numerically stable
exponential helpers they are built from.  Everything here is pure
algebra: no Monte Carlo, no configuration objects.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "cexpm1",
    "phi1",
    "psi",
    "g_ramp",
    "write_kernel",
    "write_response",
    "write_response_sq_integral",
    "readout_second_kernels",
]


def cexpm1(z):
    """exp(z) - 1, accurate for small ``|z|``, complex-safe.

    Uses the exact split exp(a+ib) - 1 = expm1(a) - 2 e^a sin^2(b/2)
    + i e^a sin(b), which keeps full precision from the real expm1.
    """
    z = np.asarray(z, dtype=complex)
    a = z.real
    b = z.imag
    ea = np.exp(a)
    return np.expm1(a) - 2.0 * ea * np.sin(b / 2) ** 2 + 1j * ea * np.sin(b)


def phi1(z):
    """(e^z - 1)/z with the removable singularity filled: phi1(0) = 1."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < 1e-8
    safe = np.where(small, 1.0, z)
    out = cexpm1(safe) / safe
    return np.where(small, 1.0 + z / 2.0 + z * z / 6.0, out)


def psi(z):
    """(z e^z - (e^z - 1))/z^2 with psi(0) = 1/2.

    Arises as the normalized integral of v e^{zv} over the unit
    interval; bounded for Re(z) <= 0.
    """
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < 1e-4
    safe = np.where(small, 1.0, z)
    out = (safe * np.exp(safe) - cexpm1(safe)) / (safe * safe)
    # Taylor: 1/2 + z/3 + z^2/8 + z^3/30 (term k: (k+1)/(k+2)! z^k)
    series = 0.5 + z / 3.0 + z * z / 8.0 + z**3 / 30.0
    return np.where(small, series, out)


def g_ramp(a, u):
    """Integral of (u - x) e^{-a x} over x in [0, u]: (u - (1-e^{-au})/a)/a.

    Evaluated as u^2 * sum_k (-au)^k/(k+2)! for small ``a u`` to avoid
    cancellation; the integral is the response of two nested exponential
    relaxations to a step drive.
    """
    a = np.asarray(a, dtype=float)
    u = np.asarray(u, dtype=float)
    x = a * u
    small = np.abs(x) < 1e-4
    safe_a = np.where(small, 1.0, a)
    closed = (u - (-np.expm1(-x)) / safe_a) / safe_a
    series = u * u * (0.5 - x / 6.0 + x * x / 24.0 - x**3 / 120.0)
    return np.where(small, series, closed)


def write_response(t, kappa1, kappa2):
    """Step response of the double cavity filter, per unit source.

    W(t) = [(1 - e^{-p t})/p - (1 - e^{-q t})/q] / (q - p) with
    p = kappa2/2 and q = kappa1/2, i.e. the time integral of the
    two-pole impulse response (e^{-p T} - e^{-q T})/(q - p).
    """
    p = kappa2 / 2.0
    q = kappa1 / 2.0
    r = q - p
    t = np.asarray(t, dtype=float)
    # (1 - e^{-at})/a = t * (1 - e^{-at})/(at), stable via expm1
    ap = t * _one_minus_exp_over(p * t)
    aq = t * _one_minus_exp_over(q * t)
    return (ap - aq) / r


def _one_minus_exp_over(x):
    """(1 - e^{-x})/x with the x -> 0 limit filled."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    out = -np.expm1(-safe) / safe
    return np.where(small, 1.0 - x / 2.0 + x * x / 6.0, out)


def write_response_sq_integral(kappa1, kappa2, t_int) -> float:
    """Closed-form integral of W(t)^2 from 0 to ``t_int``."""
    p = kappa2 / 2.0
    q = kappa1 / 2.0
    r = q - p
    T = t_int

    def pair(a, b):
        # integral of (1-e^{-at})(1-e^{-bt}) dt over [0, T]
        return (T - T * _one_minus_exp_over(a * T)
                - T * _one_minus_exp_over(b * T)
                + T * _one_minus_exp_over((a + b) * T))

    return (pair(p, p) / p**2 - 2.0 * pair(p, q) / (p * q)
            + pair(q, q) / q**2) / r**2


def write_kernel(t_int, kappa1, kappa2, s):
    """Lag kernel of the stored-excitation normalization integral.

    The four-fold time integral of the double cavity filter against a
    lag-``s`` coupling product collapses to this function of the lag:

        h(s) = (1/(8 r^2)) [ e^{-p s} G_{2p}(U)
                             - (e^{-p s} + e^{-q s}) G_{p+q}(U)
                             + e^{-q s} G_{2q}(U) ],

    with p = kappa2/2, q = kappa1/2, r = q - p, U = t_int - s, and
    G_a the ramp integral :func:`g_ramp`.  Its defining property,
    integral of h over s in [0, t_int] equal to (1/16) integral of
    W(t)^2, makes a perfectly correlated coupling give unit efficiency.
    """
    p = kappa2 / 2.0
    q = kappa1 / 2.0
    r = q - p
    if abs(r) < 1e-9 * (p + q):
        raise ValueError("degenerate cavity rates kappa1 == kappa2 "
                         "are not supported")
    s = np.asarray(s, dtype=float)
    u = t_int - s
    if np.any(u < -1e-15):
        raise ValueError("lag exceeds integration time")
    u = np.maximum(u, 0.0)
    eps_ = np.exp(-p * s)
    eqs = np.exp(-q * s)
    return (eps_ * g_ramp(2 * p, u)
            - (eps_ + eqs) * g_ramp(p + q, u)
            + eqs * g_ramp(2 * q, u)) / (8.0 * r * r)


# ---------------------------------------------------------------------------
# Second-order readout kernels.
#
# The second-order correction to the retrieval efficiency is a triple
# time integral of the zeroth-order cavity field against the coupling
# fluctuations of a single atom.  With u = t' + t'' and s = t' - t''
# the t and u integrals are elementary, leaving four lag kernels that
# multiply the four fluctuation correlation series (drive-coupling x
# drive-coupling, and its mixes with the drive-intensity factor).
# ---------------------------------------------------------------------------


def _k0_core(mu, s, tau):
    """t-integral for pieces whose u-dependence is flat, sans e^{mu s}.

    (1/2) int_s^tau e^{mu (t-s)} * 2(t - s) dt = X^2 psi(mu X),
    X = tau - s.
    """
    x = tau - s
    return x * x * psi(mu * x)


def _k1_core(mu, lam, s, tau):
    """t/u-integral for pieces with u-exponent ``lam``, sans e^{(mu+lam) s}.

    (1/2) int_s^tau dt e^{mu t} int_s^{2t-s} du e^{lam u}
      = (X/(2 lam)) e^{(mu+lam) s} [phi1((mu+2 lam) X) - phi1(mu X)],
    X = tau - s; the s-exponential is applied by the caller so it can
    be folded with the other lag factors into one decaying exponential.
    """
    x = tau - s
    return (x / (2.0 * lam)) * (phi1((mu + 2.0 * lam) * x) - phi1(mu * x))


def readout_second_kernels(tau, s, a_bar, b_bar, c_bar, n_atoms, kappa1):
    """The four lag kernels of the second-order readout correction.

    Parameters are the mean coupling coefficients of the readout
    equations of motion (``a_bar``: cavity-field self-coupling,
    ``b_bar``: spin-cavity cross coupling, ``c_bar``: spin self
    coupling), the effective atom number, and the input-mirror rate.
    Returns ``(h1, h2, h3, h4)``, complex arrays over the lag grid
    ``s``, multiplying the unconjugated-product fluctuation series
    (delta-b, delta-b), (delta-b, delta-c), (delta-c, delta-b) and
    (delta-c, delta-c) respectively; the correction is the real part
    of the lag integral of the summed products.
    """
    s = np.asarray(s, dtype=float)
    disc = (c_bar - a_bar) ** 2 + 4.0 * n_atoms * b_bar**2
    big_s = np.sqrt(disc)
    r_decay = (a_bar + c_bar).real
    beta = 0.5 * (c_bar - a_bar)
    p0 = math.sqrt(n_atoms) * np.conj(b_bar) / (2.0 * abs(disc))
    pref = 2.0 * kappa1 * p0

    # Per-series coefficient of each of the six printed groups, keyed by
    # the sign ``a`` of the e^{a S t / 2} factor.
    sqn_b = math.sqrt(n_atoms) * b_bar / big_s
    w_bb = {+1: (a_bar - c_bar + big_s) * sqn_b * n_atoms,
            -1: (a_bar - c_bar - big_s) * sqn_b * n_atoms}
    w_cb = {+1: 2.0 * b_bar * sqn_b * n_atoms,
            -1: 2.0 * b_bar * sqn_b * n_atoms}
    g_plus = (a_bar - c_bar + big_s) / (2.0 * big_s)
    g_minus = (a_bar - c_bar - big_s) / (2.0 * big_s)
    gbar_plus = (-a_bar + c_bar + big_s) / (2.0 * big_s)
    gbar_minus = (-a_bar + c_bar - big_s) / (2.0 * big_s)
    sqrt_n = math.sqrt(n_atoms)
    w_bc = {+1: sqrt_n * (a_bar - c_bar + big_s),
            -1: sqrt_n * (a_bar - c_bar - big_s)}
    w_cc = {+1: 2.0 * sqrt_n * b_bar,
            -1: 2.0 * sqrt_n * b_bar}

    h1 = np.zeros_like(s, dtype=complex)
    h2 = np.zeros_like(s, dtype=complex)
    h3 = np.zeros_like(s, dtype=complex)
    h4 = np.zeros_like(s, dtype=complex)
    for sigma0 in (+1, -1):
        mu0 = r_decay + sigma0 * 0.5 * np.conj(big_s)
        # Every piece's lag exponentials fold to the same decaying
        # factor e^{(beta + mu0) s}: the flat-u piece carries
        # e^{-a S s/2} e^{mu s} and the u-integrated piece
        # e^{(mu + lam) s}, both equal to e^{mu0 s} since lam = -a S/2.
        exp_s = np.exp((beta + mu0) * s)
        for a_sign in (+1, -1):
            mu = mu0 + a_sign * 0.5 * big_s
            lam = -a_sign * 0.5 * big_s
            k0 = exp_s * _k0_core(mu, s, tau)
            k1 = exp_s * _k1_core(mu, lam, s, tau)
            # Cavity-sourced series: flat-u piece enters +, u piece -.
            block14 = sigma0 * (k0 - k1)
            h1 += pref * w_bb[a_sign] * block14
            h3 += pref * w_cb[a_sign] * block14
            # Spin-mode-sourced series: the flat-u piece projects onto
            # the spin component of the branch eigenvector, the
            # u-exponent piece onto the cavity component.
            outer_flat = gbar_plus if a_sign > 0 else gbar_minus
            h2 += pref * w_bc[a_sign] * outer_flat * sigma0 * k0
            h4 += pref * w_cc[a_sign] * outer_flat * sigma0 * k0
            outer_u = g_plus if a_sign > 0 else g_minus
            h2 += pref * w_bc[a_sign] * outer_u * sigma0 * k1
            h4 += pref * w_cc[a_sign] * outer_u * sigma0 * k1
    return h1, h2, h3, h4
