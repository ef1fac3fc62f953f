"""Independent references: closed-form interval spectra, Prüfer phase
shooting, Bessel-based disk counts, and a radial shooting oracle for the
annulus. These never touch the FE machinery; they validate it.

Bessel functions are evaluated by series (small argument) and Miller's
backward recurrence (large argument); zeros are isolated with interlacing
brackets and refined by bisection. All ODE integrations use fixed-step RK4
so results are reproducible bit-for-bit for a fixed step count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import IncreaseModeCapError, RefineStepsError

__all__ = [
    "OracleSpectrum",
    "interval_spectrum",
    "prufer_conjugate_times",
    "bessel_j",
    "bessel_j_zeros",
    "bessel_jprime_zeros",
    "disk_spectrum",
    "disk_crossing_times",
    "annulus_first_nonzero_neumann",
]


@dataclass(frozen=True)
class OracleSpectrum:
    """Reference eigenvalues with multiplicities, ascending."""

    eigenvalues: np.ndarray
    multiplicities: np.ndarray
    source: str
    params: dict = field(default_factory=dict)

    def count_below(self, level: float) -> int:
        return int(self.multiplicities[self.eigenvalues < level].sum())

    @property
    def count(self) -> int:
        return int(self.multiplicities.sum())


def _bisect(f: Callable[[float], float], lo: float, hi: float,
            iters: int = 100) -> float:
    flo = f(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0:
            return mid
        if (flo < 0) == (fm < 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(hi)):
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# interval spectra


def interval_spectrum(c: float, t: float, bc: str, n_eigs: int = 24,
                      beta: float | None = None) -> OracleSpectrum:
    """Spectrum of -u'' - c u on (0, t).

    dirichlet: (k pi / t)^2 - c, k >= 1.
    neumann:   (k pi / t)^2 - c, k >= 0.
    robin (constant beta at both endpoints, matching the FE realization):
    roots of (w^2 - beta^2) sin(wt) = 2 beta w cos(wt) with w = sqrt(lam + c),
    plus the hyperbolic branch for beta < 0 and the w=0 root when
    beta = -2/t exactly.
    """
    if t <= 0:
        raise ValueError(f"interval length must be positive, got {t}")
    if bc == "dirichlet":
        eigs = [(k * math.pi / t) ** 2 - c for k in range(1, n_eigs + 1)]
    elif bc == "neumann":
        eigs = [(k * math.pi / t) ** 2 - c for k in range(n_eigs)]
    elif bc == "robin":
        if beta is None:
            raise ValueError("robin spectrum needs beta")
        if beta == 0.0:
            return interval_spectrum(c, t, "neumann", n_eigs)
        eigs = _robin_interval_eigs(c, t, float(beta), n_eigs)
    else:
        raise ValueError(f"unknown boundary condition {bc!r}")
    eigs = np.array(sorted(eigs)[:n_eigs])
    return OracleSpectrum(eigs, np.ones(len(eigs), dtype=int), "closed_form",
                          {"c": c, "t": t, "bc": bc, "beta": beta})


def _robin_interval_eigs(c: float, t: float, beta: float, n_eigs: int) -> list[float]:
    def f(w):
        return (w * w - beta * beta) * math.sin(w * t) - 2 * beta * w * math.cos(w * t)

    eigs: list[float] = []
    if beta < 0:
        # boundary-localized modes: (kap^2 + beta^2) tanh(kap t) + 2 beta kap = 0
        def g(kap):
            return (kap * kap + beta * beta) * math.tanh(kap * t) + 2 * beta * kap

        kmax = 2 * abs(beta) + 10.0 / t
        grid = np.linspace(1e-9, kmax, 2000)
        vals = [g(k) for k in grid]
        for i in range(len(grid) - 1):
            if vals[i] == 0.0:
                eigs.append(-grid[i] ** 2 - c)
            elif (vals[i] < 0) != (vals[i + 1] < 0):
                kap = _bisect(g, grid[i], grid[i + 1])
                eigs.append(-kap * kap - c)
    if abs(beta + 2.0 / t) < 1e-12:
        eigs.append(-c)

    w_max = (n_eigs + 2) * math.pi / t + abs(beta) + 5.0
    grid = np.linspace(1e-9, w_max, max(2000, 60 * n_eigs))
    vals = [f(w) for w in grid]
    for i in range(len(grid) - 1):
        if len(eigs) >= n_eigs + 4:
            break
        if vals[i] == 0.0:
            eigs.append(grid[i] ** 2 - c)
        elif (vals[i] < 0) != (vals[i + 1] < 0):
            w = _bisect(f, grid[i], grid[i + 1])
            eigs.append(w * w - c)
    return eigs


# ---------------------------------------------------------------------------
# Pruefer phase shooting


def _as_scalar_potential(V) -> Callable[[float], float]:
    if callable(V) and not hasattr(V, "gradient"):
        return lambda x: float(V(x))
    return lambda x: float(V(np.array([[x]]))[0])


def prufer_conjugate_times(V, bc: str, window: tuple[float, float],
                           n_steps: int = 4096) -> np.ndarray:
    """Conjugate times of -u'' + V u on (0, t) for t in the window.

    Integrates the phase theta' = cos^2(theta) - V(x) sin^2(theta) from 0
    with fixed-step RK4. Dirichlet times are upward crossings of k pi
    (k >= 1); Neumann of pi/2 + k pi. Raises RefineStepsError when the phase
    advances more than pi/2 in one step.
    """
    a, b = window
    if not 0 <= a < b:
        raise ValueError(f"window must satisfy 0 <= a < b, got {window}")
    v = _as_scalar_potential(V)

    def rhs(x, th):
        s, cs = math.sin(th), math.cos(th)
        return cs * cs - v(x) * s * s

    def rk4_step(x, th, h):
        k1 = rhs(x, th)
        k2 = rhs(x + 0.5 * h, th + 0.5 * h * k1)
        k3 = rhs(x + 0.5 * h, th + 0.5 * h * k2)
        k4 = rhs(x + h, th + h * k3)
        return th + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    if bc == "dirichlet":
        theta, target0 = 0.0, math.pi
    elif bc == "neumann":
        theta, target0 = 0.5 * math.pi, 0.5 * math.pi + math.pi
    else:
        raise ValueError(f"unknown boundary condition {bc!r}")

    h = b / n_steps
    times = []
    next_target = target0
    x = 0.0
    for _ in range(n_steps):
        theta_new = rk4_step(x, theta, h)
        if theta_new - theta > 0.5 * math.pi:
            raise RefineStepsError(
                f"phase advanced {theta_new - theta:.3f} > pi/2 in one step; "
                f"increase n_steps beyond {n_steps}")
        while theta < next_target <= theta_new:
            lo, hi = 0.0, h
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if rk4_step(x, theta, mid) < next_target:
                    lo = mid
                else:
                    hi = mid
            times.append(x + 0.5 * (lo + hi))
            next_target += math.pi
        x += h
        theta = theta_new
    times = np.array([s for s in times if a <= s <= b])
    return np.sort(times)


# ---------------------------------------------------------------------------
# Bessel functions of the first kind (series + Miller backward recurrence)


def bessel_j(m: int, x: float) -> float:
    """J_m(x) for integer m >= 0 and x >= 0."""
    if m < 0 or x < 0:
        raise ValueError("bessel_j needs m >= 0 and x >= 0")
    if x == 0.0:
        return 1.0 if m == 0 else 0.0
    if x <= 10.0:
        return _bessel_series(m, x)
    return _bessel_miller(m, x)[m]


def _bessel_series(m: int, x: float) -> float:
    half = 0.5 * x
    term = 1.0
    for k in range(1, m + 1):
        term *= half / k
    total = term
    for j in range(1, 200):
        term *= -(half * half) / (j * (m + j))
        total += term
        if abs(term) < 1e-18 * max(abs(total), 1e-280):
            break
    return total


def _bessel_miller(m: int, x: float) -> list[float]:
    """J_0..J_m by backward recurrence, normalized by J_0 + 2 sum J_{2k} = 1."""
    top = int(max(m, x) + 10 * max(m, x) ** 0.34 + 22)
    if top % 2:
        top += 1
    jp, j = 0.0, 1e-30
    out = [0.0] * (m + 1)
    norm = 0.0
    for k in range(top, 0, -1):
        jm = (2.0 * k / x) * j - jp
        jp, j = j, jm
        if abs(j) > 1e250:
            jp *= 1e-250
            j *= 1e-250
            norm *= 1e-250
            for i in range(m + 1):
                out[i] *= 1e-250
        if k - 1 <= m:
            out[k - 1] = j
        if (k - 1) % 2 == 0:
            norm += 2.0 * j
    norm -= j  # J_0 counted twice above
    return [v / norm for v in out]


def bessel_jprime(m: int, x: float) -> float:
    if m == 0:
        return -bessel_j(1, x)
    return 0.5 * (bessel_j(m - 1, x) - bessel_j(m + 1, x))


def bessel_j_zeros(m: int, count: int) -> np.ndarray:
    """First `count` positive zeros of J_m, via interlacing brackets."""
    if m == 0:
        zeros = []
        x = 1.0
        step = math.pi / 4.0
        prev = bessel_j(0, x)
        while len(zeros) < count:
            xn = x + step
            cur = bessel_j(0, xn)
            if prev == 0.0:
                zeros.append(x)
            elif (prev < 0) != (cur < 0):
                zeros.append(_bisect(lambda z: bessel_j(0, z), x, xn))
            x, prev = xn, cur
        return np.array(zeros[:count])
    lower = bessel_j_zeros(m - 1, count + 1)
    zeros = [_bisect(lambda z, _m=m: bessel_j(_m, z), lower[k], lower[k + 1])
             for k in range(count)]
    return np.array(zeros)


def bessel_jprime_zeros(m: int, count: int) -> np.ndarray:
    """First `count` positive zeros of J_m' (for m=0 these equal zeros of J_1)."""
    if m == 0:
        return bessel_j_zeros(1, count)
    jz = bessel_j_zeros(m, count)
    f = lambda z, _m=m: bessel_jprime(_m, z)
    zeros = [_bisect(f, 0.5 * m, jz[0])]
    for k in range(1, count):
        zeros.append(_bisect(f, jz[k - 1], jz[k]))
    return np.array(zeros)


# ---------------------------------------------------------------------------
# disk counts


def _disk_zero_table(bc: str, threshold: float, max_mode: int):
    """(mode, zero) pairs with zero < threshold.

    Modes are scanned upward until the first zero of a mode clears the
    threshold (first zeros increase with the mode); if the cap is reached
    before that natural stop the count would be incomplete, so error.
    """
    zeros_fn = bessel_j_zeros if bc == "dirichlet" else bessel_jprime_zeros
    table = []
    m = 0
    while True:
        if zeros_fn(m, 1)[0] >= threshold:
            return table
        if m >= max_mode:
            raise IncreaseModeCapError(
                f"angular mode cap {max_mode} too small: mode {m} still has a "
                f"zero below the level threshold {threshold:.6g}")
        k = 4
        while zeros_fn(m, k)[-1] < threshold:
            k += 4
        table.extend((m, float(z)) for z in zeros_fn(m, k) if z < threshold)
        m += 1


def disk_spectrum(lam_level: float, bc: str, t: float,
                  max_mode: int = 40) -> OracleSpectrum:
    """Disk eigenvalues below lam_level (radius t), with multiplicities.

    Dirichlet eigenvalues are (j_{m,k}/t)^2 with multiplicity 2 for m >= 1;
    Neumann uses zeros of J_m' plus the constant zero mode.
    """
    if lam_level <= 0:
        raise ValueError(f"spectral level must be positive, got {lam_level}")
    if bc not in ("dirichlet", "neumann"):
        raise ValueError(f"unknown boundary condition {bc!r}")
    threshold = t * math.sqrt(lam_level)
    entries = []
    if bc == "neumann":
        entries.append((0.0, 1))  # constant mode
    for m, z in _disk_zero_table(bc, threshold, max_mode):
        entries.append(((z / t) ** 2, 2 if m >= 1 else 1))
    entries.sort()
    eigs = np.array([e[0] for e in entries])
    mult = np.array([e[1] for e in entries], dtype=int)
    return OracleSpectrum(eigs, mult, "bessel",
                          {"lam_level": lam_level, "bc": bc, "t": t})


def disk_crossing_times(lam_level: float, bc: str, t_range: tuple[float, float],
                        max_mode: int = 40) -> list[tuple[float, int]]:
    """(t_star, multiplicity) where the disk of radius t has eigenvalue lam_level.

    For the level-shifted star family these are the conjugate times:
    t_star = z / sqrt(lam_level) for each relevant Bessel (or derivative) zero.
    """
    a, b = t_range
    threshold = b * math.sqrt(lam_level)
    out: dict[float, int] = {}
    for m, z in _disk_zero_table(bc, threshold * 1.0000000001, max_mode):
        ts = z / math.sqrt(lam_level)
        if a <= ts <= b:
            out[ts] = out.get(ts, 0) + (2 if m >= 1 else 1)
    return sorted(out.items())


# ---------------------------------------------------------------------------
# annulus radial shooting


def annulus_first_nonzero_neumann(r_in: float, r_out: float,
                                  angular_mode: int = 1,
                                  n_steps: int = 2048) -> float:
    """First nonzero Neumann eigenvalue of the annulus (fixed angular mode).

    Shoots the radial equation u'' + u'/rho + (lam - m^2/rho^2) u = 0 from
    u(r_in) = 1, u'(r_in) = 0 and bisects the first positive root of
    F(lam) = u'(r_out). For the first nonzero mode use angular_mode=1.
    """
    if not 0 < r_in < r_out:
        raise ValueError("annulus radii must satisfy 0 < r_in < r_out")
    m2 = float(angular_mode * angular_mode)
    h = (r_out - r_in) / n_steps

    def F(lam: float) -> float:
        u, du = 1.0, 0.0
        rho = r_in

        def acc(r, uu, duu):
            return -duu / r - (lam - m2 / (r * r)) * uu

        for _ in range(n_steps):
            k1u, k1d = du, acc(rho, u, du)
            k2u, k2d = du + 0.5 * h * k1d, acc(rho + 0.5 * h, u + 0.5 * h * k1u, du + 0.5 * h * k1d)
            k3u, k3d = du + 0.5 * h * k2d, acc(rho + 0.5 * h, u + 0.5 * h * k2u, du + 0.5 * h * k2d)
            k4u, k4d = du + h * k3d, acc(rho + h, u + h * k3u, du + h * k3d)
            u += (h / 6.0) * (k1u + 2 * k2u + 2 * k3u + k4u)
            du += (h / 6.0) * (k1d + 2 * k2d + 2 * k3d + k4d)
            rho += h
        return du

    lam_max = 4.0 * (math.pi / (r_out - r_in)) ** 2 + m2 / (r_in * r_in)
    grid = np.linspace(1e-8, lam_max, 400)
    prev = F(grid[0])
    for i in range(1, len(grid)):
        cur = F(grid[i])
        if (prev < 0) != (cur < 0):
            return _bisect(F, grid[i - 1], grid[i], iters=80)
        prev = cur
    raise RuntimeError("no Neumann eigenvalue found below the scan ceiling")
