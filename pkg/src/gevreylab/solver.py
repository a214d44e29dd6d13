"""Mild-solution machinery: weighted norms, Duhamel integrals, Picard
fixed-point iteration, and an exponential time-differencing marcher.

The integral equation under study is

    X(t) = Y(t) + B(X, X)(t),
    Y(t) = exp(-t A^2) u0,
    B(u, v)(t) = -int_0^t exp(-(t-s) A^2) P(Mu(s).grad) v(s) ds,

solved two ways: `picard_solve` iterates X_{n} = Y + B(X_{n-1}, X_{n-1})
literally on a stored trajectory (contraction constants measurable), and
`march` advances the semilinear ODE u' = -|k|^2 u + N(u) with ETDRK4
(heat part exact).

The contraction space norm is

    |v| = sup_t exp(-zeta(t)) t^{s1} || exp(theta(t) A) A^{s2} v(t) ||,

with theta either constant-in-sqrt(t) (theta = lambda sqrt(t)) or ramped
(theta = lambda0 t / sqrt(T)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.special import gamma as _gamma

from .errors import BlowUpError, GridError, PicardDivergenceError, UnreliableWeightError
from .spectral import (
    ModelConfig,
    MultiplierSpec,
    SpectralField,
    WavenumberGrid,
    _analyze_half,
    _full_from_half,
    _half_from_full,
    _nonlinear_half,
    _nonlinear_half_divform,
    _project_half,
    _synthesize_half,
    compensated_sum,
    norm_l2,
    random_field,
)

__all__ = [
    "WeightedNormSpec",
    "TrajectoryGrid",
    "PicardState",
    "ContractionReport",
    "MarchResult",
    "RunLog",
    "graded_times",
    "heat_propagate",
    "heat_energy_series",
    "duhamel_bilinear",
    "duhamel_sweep",
    "weighted_norm",
    "contraction_report",
    "picard_solve",
    "march",
    "march_to_times",
    "kato_norm_spec",
]


# ---------------------------------------------------------------------------
# weighted Banach norms
# ---------------------------------------------------------------------------

CONSTANT = "constant"
SQRT_RAMP = "sqrt_ramp"


@dataclass(frozen=True)
class WeightedNormSpec:
    """Parameters of the time-weighted Gevrey-Sobolev sup norm.

    lambda_profile "constant": theta(t) = lam * sqrt(t);
    "sqrt_ramp": theta(t) = lam0 * sqrt(t/T) * sqrt(t) = lam0 * t / sqrt(T).
    zeta "standard": zeta(t) = lam(t)^2/4 + zeta_shift * ln<lam(t)>, with
    lam(t) = lam0 sqrt(t/T) for the ramp profile.
    """

    s1: float = 0.375
    s2: float = 1.25
    lambda_profile: str = CONSTANT
    lam: float = 0.0
    ramp_T: float = 1.0
    zeta_kind: str = "zero"
    zeta_shift: float = 0.0
    homogeneous: bool = True

    def __post_init__(self):
        if self.s1 < 0 or self.s2 < 0:
            raise ValueError("s1, s2 must be nonnegative")
        if self.lambda_profile not in (CONSTANT, SQRT_RAMP):
            raise ValueError(f"unknown lambda profile {self.lambda_profile!r}")
        if self.zeta_kind not in ("zero", "standard"):
            raise ValueError(f"unknown zeta profile {self.zeta_kind!r}")
        if self.lambda_profile == SQRT_RAMP and not self.ramp_T > 0:
            raise ValueError("ramp_T must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")

    def lambda_at(self, t: float) -> float:
        if self.lambda_profile == SQRT_RAMP:
            return self.lam * math.sqrt(t / self.ramp_T)
        return self.lam

    def theta_at(self, t: float) -> float:
        return self.lambda_at(t) * math.sqrt(t)

    def zeta_at(self, t: float) -> float:
        if self.zeta_kind == "zero":
            return 0.0
        lam = self.lambda_at(t)
        return lam * lam / 4.0 + self.zeta_shift * math.log(math.hypot(1.0, lam))

    def instant_multiplier(self, t: float) -> MultiplierSpec:
        power = (MultiplierSpec.frac_power(self.s2) if self.homogeneous
                 else MultiplierSpec.inhom_frac_power(self.s2))
        th = self.theta_at(t)
        if th == 0.0:
            return power
        return MultiplierSpec.composite(MultiplierSpec.gevrey(th), power)


def kato_norm_spec(lam: float = 0.0, s1: float = 0.375, s2: float = 1.25,
                   **kw) -> WeightedNormSpec:
    """The (t^{3/8}, A^{5/4}) contraction-space norm, optionally Gevrey
    weighted with theta = lam sqrt(t)."""
    return WeightedNormSpec(s1=s1, s2=s2, lam=lam, **kw)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryGrid:
    """Fields at strictly increasing times t_1 < ... < t_M = T, plus the
    t = 0 datum as quadrature anchor. All fields share one grid."""

    times: np.ndarray
    fields: list
    initial: SpectralField | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times.ndim != 1 or len(self.fields) != self.times.size:
            raise GridError("times and fields must align")
        if self.times.size == 0 or self.times[0] <= 0 or np.any(np.diff(self.times) <= 0):
            raise GridError("times must be strictly increasing and positive")
        g = self.fields[0].grid
        for f in self.fields:
            if f.grid != g:
                raise GridError("trajectory fields must share one grid")

    @property
    def grid(self) -> WavenumberGrid:
        return self.fields[0].grid

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def node_index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[i], t, rel_tol=1e-12, abs_tol=1e-15):
            raise GridError(f"t={t} is not a trajectory node")
        return i

    def map(self, fn) -> "TrajectoryGrid":
        return TrajectoryGrid(self.times.copy(), [fn(f) for f in self.fields],
                              self.initial)

    def __sub__(self, other: "TrajectoryGrid") -> "TrajectoryGrid":
        if other.times.shape != self.times.shape or np.any(other.times != self.times):
            raise GridError("trajectories have different node sets")
        diff = [a - b for a, b in zip(self.fields, other.fields)]
        init = None
        if self.initial is not None and other.initial is not None:
            init = self.initial - other.initial
        return TrajectoryGrid(self.times.copy(), diff, init)


def graded_times(T: float, M: int, p: float = 2.0) -> np.ndarray:
    """Nodes t_m = T (m/M)^p, graded toward 0 to resolve the integrable
    endpoint singularities of the Duhamel weights."""
    m = np.arange(1, M + 1, dtype=np.float64)
    return T * (m / M) ** p


def heat_propagate(u0: SpectralField, times: np.ndarray) -> TrajectoryGrid:
    """Exact heat trajectory: per-mode factors exp(-t |k|^2)."""
    times = np.asarray(times, dtype=np.float64)
    ksq = u0.grid.k_sq[..., None]
    fields = [u0.with_coeffs(u0.coeffs * np.exp(-t * ksq), time_tag=float(t))
              for t in times]
    return TrajectoryGrid(times, fields, initial=u0)


def heat_energy_series(u0: SpectralField, times: np.ndarray):
    """Exact (||u(t)||^2, ||A u(t)||^2) series for the heat flow, evaluated
    in closed form per mode. Vectorized over many times."""
    grid = u0.grid
    power = (u0.coeffs.real ** 2 + u0.coeffs.imag ** 2).sum(axis=-1).ravel()
    ksq = grid.k_sq.ravel()
    keep = power > 0
    power, ksq = power[keep], ksq[keep]
    L3 = grid.box_length ** 3
    times = np.asarray(times, dtype=np.float64)
    e = np.empty_like(times)
    ae = np.empty_like(times)
    chunk = max(1, int(4e6 // max(power.size, 1)))
    for i0 in range(0, times.size, chunk):
        tt = times[i0:i0 + chunk, None]
        decay = np.exp(-2.0 * tt * ksq[None, :]) * power[None, :]
        e[i0:i0 + chunk] = L3 * decay.sum(axis=1)
        ae[i0:i0 + chunk] = L3 * (decay * ksq[None, :]).sum(axis=1)
    return e, ae


# ---------------------------------------------------------------------------
# weighted norm of a trajectory
# ---------------------------------------------------------------------------

def weighted_instant_norm(f: SpectralField, spec: WeightedNormSpec, t: float) -> float:
    return math.exp(-spec.zeta_at(t)) * t ** spec.s1 * norm_l2(f, spec.instant_multiplier(t))


def weighted_norm(traj: TrajectoryGrid, spec: WeightedNormSpec,
                  return_argmax: bool = False):
    """sup over nodes of e^{-zeta(t)} t^{s1} ||e^{theta(t)A} A^{s2} v(t)||."""
    best = -math.inf
    best_t = None
    for t, f in zip(traj.times, traj.fields):
        try:
            val = weighted_instant_norm(f, spec, float(t))
        except UnreliableWeightError as err:
            raise UnreliableWeightError(
                f"weight unreliable at node t={float(t):g}: {err}", err.admissible_max
            ) from err
        if val > best:
            best, best_t = val, float(t)
    if return_argmax:
        return best, best_t
    return best


# ---------------------------------------------------------------------------
# Duhamel quadrature
# ---------------------------------------------------------------------------

def _exp_moments(w: np.ndarray, jmax: int = 3) -> list:
    """A_i(w) = int_0^1 exp(-w u) u^i du for i = 0..jmax, elementwise in w.

    Closed forms suffer cancellation for small w; switch to the Taylor
    series there (design: series for |w| < 1/2, closed form otherwise).
    """
    w = np.asarray(w, dtype=np.float64)
    small = np.abs(w) < 0.5
    ws = np.where(small, w, 0.0)
    wl = np.where(small, 1.0, w)
    ew = np.exp(-wl)
    out = []
    for i in range(jmax + 1):
        # series: sum_m (-w)^m / (m! (i + m + 1))
        ser = np.zeros_like(w)
        term = np.ones_like(w)
        for m in range(0, 18):
            ser = ser + term / (i + m + 1.0)
            term = term * (-ws) / (m + 1.0)
        if i == 0:
            closed = (1.0 - ew) / wl
        else:
            closed = (i * out[i - 1] - ew) / wl
        out.append(np.where(small, ser, closed))
    return out


def _lagrange_coeffs(s_nodes: np.ndarray, a: float, b: float) -> np.ndarray:
    """Coefficients c (4x4) so that the cubic through (s_j, y_j) restricted
    to [a, b] is sum_j y_j * sum_p c[j, p] sigma^p with sigma = (s-a)/(b-a)."""
    h = b - a
    V = np.empty((4, 4))
    for j in range(4):
        # Lagrange basis l_j(s) as polynomial in sigma
        num = np.poly1d([1.0])
        den = 1.0
        for m in range(4):
            if m == j:
                continue
            # s - s_m = a + h sigma - s_m
            num = num * np.poly1d([h, a - s_nodes[m]])
            den *= s_nodes[j] - s_nodes[m]
        c = (num / den).coeffs[::-1]
        V[j, :len(c)] = c
        V[j, len(c):] = 0.0
    return V


class _DuhamelEngine:
    """Shared machinery: nonlinearity values at trajectory nodes and the
    panel-exact heat quadrature with the semigroup recurrence."""

    def __init__(self, u: TrajectoryGrid, v: TrajectoryGrid, cfg: ModelConfig,
                 workers: int = 1):
        if v is not u and (u.times.shape != v.times.shape or np.any(u.times != v.times)):
            raise GridError("u and v trajectories must share nodes")
        self.traj_u, self.traj_v, self.cfg = u, v, cfg
        self.grid = u.grid
        self.workers = workers
        self.ksq_half = self.grid._half_ksq[..., None]
        self.times = u.times
        self._n_values = None

    def n_values(self) -> list:
        """Half-spectrum N(s_m) = P(Mu(s_m).grad)v(s_m) at every node, plus
        the t=0 anchor when both trajectories carry one."""
        if self._n_values is not None:
            return self._n_values
        grid, cfg = self.grid, self.cfg
        vals = []
        u_is_v = self.traj_v is self.traj_u
        for m in range(self.times.size):
            uh = _half_from_full(grid, self.traj_u.fields[m].coeffs)
            vh = uh if u_is_v else _half_from_full(grid, self.traj_v.fields[m].coeffs)
            vals.append(_nonlinear_half(grid, uh, vh, cfg, self.workers))
        anchor = None
        if self.traj_u.initial is not None and self.traj_v.initial is not None:
            uh = _half_from_full(grid, self.traj_u.initial.coeffs)
            vh = uh if u_is_v else _half_from_full(grid, self.traj_v.initial.coeffs)
            anchor = _nonlinear_half(grid, uh, vh, cfg, self.workers)
        self._n_values = (vals, anchor)
        return self._n_values

    def _first_segment(self, n_vals, anchor):
        """Integral over [0, t_1]. With an anchor value at s = 0 a cubic
        through (0, t1, t2, t3) is used; otherwise the nonlinearity is
        modelled as N(t1) (s/t1)^{-alpha} with alpha fitted from the first
        two nodes (the s^{-2 s1} endpoint behaviour of rough data)."""
        t = self.times
        t1 = t[0]
        if anchor is not None and t.size >= 3:
            s_nodes = np.array([0.0, t[0], t[1], t[2]])
            V = _lagrange_coeffs(s_nodes, 0.0, t1)
            w = self.ksq_half * t1
            A = _exp_moments(w)
            # heat factor referenced to the segment's right end s = t1:
            # weight(sigma) = exp(-(t1-s) k^2) = exp(-w (1-sigma))
            B = [sum(math.comb(j, i) * (-1.0) ** i * A[i] for i in range(j + 1))
                 for j in range(4)]
            # B[j] = int_0^1 exp(-w(1-sigma)) sigma^j dsigma, via sigma -> 1-u
            vals = [anchor, n_vals[0], n_vals[1], n_vals[2]]
            contrib = np.zeros_like(n_vals[0])
            for j in range(4):
                poly = np.zeros_like(n_vals[0])
                for m in range(4):
                    if V[m, j] != 0.0:
                        poly = poly + V[m, j] * vals[m]
                contrib = contrib + B[j] * poly
            return t1 * contrib
        # power-law head
        norm1 = float(np.abs(n_vals[0]).max())
        alpha = 0.0
        if t.size >= 2 and norm1 > 0:
            norm2 = float(np.abs(n_vals[1]).max())
            if norm2 > 0:
                alpha = -math.log(norm2 / norm1) / math.log(t[1] / t[0])
                alpha = min(max(alpha, 0.0), 0.9)
        return t1 / (1.0 - alpha) * n_vals[0]

    def _panel(self, m: int, n_vals) -> np.ndarray:
        """Integral over [t_m, t_{m+1}] with the heat factor referenced to
        the right endpoint: exact exp(-(t_{m+1}-s)k^2) times a cubic
        interpolant of N through four neighbouring nodes."""
        t = self.times
        a, b = t[m], t[m + 1]
        lo = min(max(m - 1, 0), t.size - 4)
        s_nodes = t[lo:lo + 4]
        V = _lagrange_coeffs(np.asarray(s_nodes), a, b)
        h = b - a
        w = self.ksq_half * h
        A = _exp_moments(w)
        B = [sum(math.comb(j, i) * (-1.0) ** i * A[i] for i in range(j + 1))
             for j in range(4)]
        contrib = np.zeros_like(n_vals[0])
        for j in range(4):
            poly = None
            for mm in range(4):
                if V[mm, j] == 0.0:
                    continue
                term = V[mm, j] * n_vals[lo + mm]
                poly = term if poly is None else poly + term
            if poly is not None:
                contrib = contrib + B[j] * poly
        return h * contrib

    def sweep(self) -> list:
        """B(u, v) at every node via the semigroup recurrence
        I(t_{m+1}) = exp(-(t_{m+1}-t_m) A^2) I(t_m) + panel(m)."""
        n_vals, anchor = self.n_values()
        t = self.times
        acc = self._first_segment(n_vals, anchor)
        out = [-acc]
        for m in range(t.size - 1):
            decay = np.exp(-(t[m + 1] - t[m]) * self.ksq_half)
            acc = decay * acc + self._panel(m, n_vals)
            out.append(-acc)
        return out


def duhamel_sweep(u: TrajectoryGrid, v: TrajectoryGrid, cfg: ModelConfig,
                  workers: int = 1) -> TrajectoryGrid:
    """B(u, v) evaluated at every trajectory node (one semigroup sweep)."""
    eng = _DuhamelEngine(u, v, cfg, workers)
    halves = eng.sweep()
    grid = u.grid
    fields = [SpectralField(grid, _full_from_half(grid, h), float(t))
              for h, t in zip(halves, u.times)]
    zero = u.fields[0].with_coeffs(np.zeros_like(u.fields[0].coeffs), time_tag=0.0)
    return TrajectoryGrid(u.times.copy(), fields, initial=zero)


def duhamel_bilinear(u: TrajectoryGrid, v: TrajectoryGrid, cfg: ModelConfig,
                     t: float, workers: int = 1) -> SpectralField:
    """-int_0^t exp(-(t-s)A^2) P(Mu(s).grad)v(s) ds at a trajectory node t."""
    if t > u.T * (1 + 1e-12):
        raise GridError(f"t={t} outside trajectory range (T={u.T})")
    idx = u.node_index(t)
    eng = _DuhamelEngine(u, v, cfg, workers)
    halves = eng.sweep()
    grid = u.grid
    return SpectralField(grid, _full_from_half(grid, halves[idx]), float(t))


# ---------------------------------------------------------------------------
# contraction reports and Picard iteration
# ---------------------------------------------------------------------------

@dataclass
class ContractionReport:
    Y_norm: float
    gamma_est: float
    R: float
    kappa: float
    beta_integral: float
    observed_ratios: list = field(default_factory=list)

    @property
    def contractive(self) -> bool:
        return self.kappa < 1.0


def beta_time_integral(rel_tol: float = 1e-12) -> float:
    """int_0^1 (1-s)^{-5/8} s^{-3/4} ds by adaptive quadrature with the
    endpoint algebraic weights handled by QUADPACK (QAWS)."""
    val, _ = quad(lambda s: 1.0, 0.0, 1.0, weight="alg", wvar=(-0.75, -0.625),
                  epsabs=0.0, epsrel=rel_tol, limit=200)
    return val


def beta_gamma_identity() -> float:
    """Gamma(1/4) Gamma(3/8) / Gamma(5/8), the closed form of the same
    integral; used to cross-check the quadrature."""
    return _gamma(0.25) * _gamma(0.375) / _gamma(0.625)


def contraction_report(u0: SpectralField, T: float, spec: WeightedNormSpec,
                       cfg: ModelConfig, n_pairs: int = 5, n_nodes: int = 48,
                       seed: int = 2024, workers: int = 1) -> ContractionReport:
    """Empirical contraction constants for X = Y + B(X, X) on (0, T].

    gamma_est is a sampled supremum of |B(u,v)| / (|u| |v|) over seeded
    heat-flow trajectory pairs (including Y itself); the paper's constant
    is nonconstructive, so only the sampled value is reported.
    """
    times = graded_times(T, n_nodes)
    Y = heat_propagate(u0, times)
    y_norm = weighted_norm(Y, spec)
    sources = [Y]
    u0n = norm_l2(u0)
    for j in range(n_pairs):
        f = random_field(u0.grid, beta=1.6 + 0.3 * (j % 3), seed=seed + j,
                         cfg=cfg, normalize=u0n if u0n > 0 else 1.0)
        sources.append(heat_propagate(f, times))
    gamma = 0.0
    for a in range(len(sources)):
        for b in range(a, len(sources)):
            u, v = sources[a], sources[b]
            nu, nv = weighted_norm(u, spec), weighted_norm(v, spec)
            if nu == 0 or nv == 0:
                continue
            bv = weighted_norm(duhamel_sweep(u, v, cfg, workers), spec)
            gamma = max(gamma, bv / (nu * nv))
    R = y_norm
    return ContractionReport(
        Y_norm=y_norm,
        gamma_est=gamma,
        R=R,
        kappa=4.0 * gamma * R,
        beta_integral=beta_time_integral(),
    )


@dataclass
class PicardState:
    iteration: int
    norm: float
    diff_norm: float
    ratio: float | None


@dataclass
class PicardResult:
    trajectory: TrajectoryGrid
    history: list
    converged: bool
    contractive_flag: bool
    report: ContractionReport

    @property
    def observed_ratios(self) -> list:
        return [st.ratio for st in self.history if st.ratio is not None]


def picard_solve(u0: SpectralField, T: float, spec: WeightedNormSpec,
                 cfg: ModelConfig, tol: float = 1e-10, max_iter: int = 40,
                 n_nodes: int = 48, report: ContractionReport | None = None,
                 workers: int = 1) -> PicardResult:
    """Iterate X_0 = Y, X_n = Y + B(X_{n-1}, X_{n-1}) on a graded trajectory.

    Stops when |X_n - X_{n-1}| <= tol * |X_1 - X_0|. Non-contractive input
    (kappa >= 1) still runs, flagged, to allow exploring breakdown; three
    consecutive growing difference norms raise PicardDivergenceError.
    """
    if report is None:
        report = contraction_report(u0, T, spec, cfg, n_nodes=n_nodes,
                                    workers=workers)
    times = graded_times(T, n_nodes)
    Y = heat_propagate(u0, times)
    X = Y
    history = [PicardState(0, weighted_norm(Y, spec), math.inf, None)]
    first_diff = None
    prev_diff = None
    grow_streak = 0
    converged = False
    for it in range(1, max_iter + 1):
        BX = duhamel_sweep(X, X, cfg, workers)
        Xn = TrajectoryGrid(times.copy(),
                            [y + b for y, b in zip(Y.fields, BX.fields)],
                            initial=u0)
        diff = weighted_norm(Xn - X, spec)
        ratio = None if prev_diff in (None, 0.0) else diff / prev_diff
        history.append(PicardState(it, weighted_norm(Xn, spec), diff, ratio))
        X = Xn
        if first_diff is None:
            first_diff = diff if diff > 0 else 1.0
        if prev_diff is not None and diff > prev_diff:
            grow_streak += 1
            if grow_streak >= 3:
                raise PicardDivergenceError(
                    f"difference norms grew for 3 consecutive iterations "
                    f"(kappa={report.kappa:.3g})", history)
        else:
            grow_streak = 0
        prev_diff = diff
        if diff <= tol * first_diff:
            converged = True
            break
    report.observed_ratios = [st.ratio for st in history if st.ratio is not None]
    return PicardResult(X, history, converged, report.contractive, report)


# ---------------------------------------------------------------------------
# ETDRK4 marcher
# ---------------------------------------------------------------------------

def _phi_funcs(z: np.ndarray):
    """phi_1..phi_3 evaluated stably: Taylor series for |z| < 1/2, closed
    form otherwise (z real and nonpositive here)."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < 0.5
    zs = np.where(small, z, 0.0)
    zl = np.where(small, 1.0, z)
    ez = np.exp(zl)

    def series(shift):
        # phi_k(z) = sum_{m>=0} z^m / (m+k)!
        acc = np.zeros_like(z)
        term = np.full_like(z, 1.0 / math.factorial(shift))
        for m in range(0, 16):
            acc = acc + term
            term = term * zs / (m + shift + 1.0)
        return acc

    phi1 = np.where(small, series(1), (ez - 1.0) / zl)
    phi2 = np.where(small, series(2), (ez - 1.0 - zl) / (zl * zl))
    phi3 = np.where(small, series(3), (ez - 1.0 - zl - 0.5 * zl * zl) / (zl ** 3))
    return phi1, phi2, phi3


@dataclass
class _EtdCoeffs:
    E: np.ndarray
    E2: np.ndarray
    Q: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray


def _etdrk4_coeffs(ksq_half: np.ndarray, dt: float) -> _EtdCoeffs:
    z = -dt * ksq_half
    phi1, phi2, phi3 = _phi_funcs(z)
    phi1h, _, _ = _phi_funcs(z / 2.0)
    E = np.exp(z)
    E2 = np.exp(z / 2.0)
    Q = 0.5 * dt * phi1h
    f1 = dt * (phi1 - 3.0 * phi2 + 4.0 * phi3)
    f2 = dt * (2.0 * phi2 - 4.0 * phi3)
    f3 = dt * (4.0 * phi3 - phi2)
    return _EtdCoeffs(E[..., None], E2[..., None], Q[..., None],
                      f1[..., None], f2[..., None], f3[..., None])


@dataclass
class RunLog:
    """Norm series logged along a march at the requested cadence."""

    times: list = field(default_factory=list)
    norm_sq: list = field(default_factory=list)
    a_norm_sq: list = field(default_factory=list)
    div_max: list = field(default_factory=list)
    advection_defect: list = field(default_factory=list)
    cfl_violations: int = 0

    def as_arrays(self):
        return (np.asarray(self.times), np.asarray(self.norm_sq),
                np.asarray(self.a_norm_sq))


@dataclass
class MarchResult:
    trajectory: TrajectoryGrid
    log: RunLog
    final: SpectralField


def _half_norm_sq(grid: WavenumberGrid, half: np.ndarray,
                  mult: np.ndarray | None = None) -> float:
    power = (half.real ** 2 + half.imag ** 2).sum(axis=-1)
    if mult is not None:
        power = power * mult
    power = power * grid._half_weight
    return grid.box_length ** 3 * compensated_sum(power)


CFL_SAFETY = 0.5


def march(u0: SpectralField, t_span: tuple, dt: float, cfg: ModelConfig,
          hooks=None, log_cadence: int = 1, workers: int = 1,
          blowup_factor: float = 1e6, keep_fields: bool = False) -> MarchResult:
    """Fourth-order exponential time-differencing Runge-Kutta on
    u_hat' = -|k|^2 u_hat + N_hat(u); the heat part is exact.

    hooks, if given, receives (time, SpectralField) at each logged time and
    must not mutate the field (coefficients are handed out read-only).
    Norm growth beyond blowup_factor x initial raises BlowUpError.
    """
    if dt <= 0:
        raise GridError("dt must be positive")
    t_start, t_end = float(t_span[0]), float(t_span[1])
    if t_end <= t_start:
        raise GridError("empty time span")
    grid = u0.grid
    n_steps = int(round((t_end - t_start) / dt))
    if not math.isclose(t_start + n_steps * dt, t_end, rel_tol=1e-9, abs_tol=1e-12):
        n_steps = int(math.ceil((t_end - t_start) / dt - 1e-12))
    ksq_half = grid._half_ksq
    co = _etdrk4_coeffs(ksq_half, dt)
    state = _half_from_full(grid, u0.coeffs)
    if cfg.projection == "leray":
        state = _project_half(grid, state, cfg)

    linear_only = cfg.is_linear
    div_form_ok = (cfg.projection == "leray"
                   and np.array_equal(cfg.M, np.eye(3)))

    def nonlin(h):
        if div_form_ok:
            return _nonlinear_half_divform(grid, h, cfg, workers,
                                           return_velocity=True)
        return _nonlinear_half(grid, h, h, cfg, workers, return_velocity=True)

    log = RunLog()
    logged_fields = []
    logged_times = []
    norm0_sq = _half_norm_sq(grid, state)
    k_axis = max(grid.k_axis_max, grid.dk)

    def log_state(t, h, vel_max=None):
        nsq = _half_norm_sq(grid, h)
        ansq = _half_norm_sq(grid, h, ksq_half)
        log.times.append(t)
        log.norm_sq.append(nsq)
        log.a_norm_sq.append(ansq)
        kx, ky, kz = grid._half_kvec
        div = kx * h[..., 0] + ky * h[..., 1] + kz * h[..., 2]
        log.div_max.append(float(np.abs(div).max()))
        if not linear_only:
            nl = (_nonlinear_half_divform(grid, h, cfg, workers) if div_form_ok
                  else _nonlinear_half(grid, h, h, cfg, workers))
            inner = float((grid._half_weight[..., None]
                           * (h.conj() * nl).real).sum() * grid.box_length ** 3)
            log.advection_defect.append(2.0 * inner)
        else:
            log.advection_defect.append(0.0)
        if keep_fields or hooks is not None:
            f = SpectralField(grid, _full_from_half(grid, h), t)
            f.coeffs.setflags(write=False)
            if hooks is not None:
                hooks(t, f)
            if keep_fields:
                logged_fields.append(f)
                logged_times.append(t)
        return nsq

    log_state(t_start, state)
    t = t_start
    for step in range(n_steps):
        if linear_only:
            state = co.E * state
        else:
            n1, W = nonlin(state)
            if step % 25 == 0:
                vmax = float(np.abs(W).max())
                if vmax > 0 and dt > CFL_SAFETY / (vmax * k_axis):
                    log.cfl_violations += 1
            a = co.E2 * state + co.Q * n1
            n2 = nonlin(a)[0]
            b = co.E2 * state + co.Q * n2
            n3 = nonlin(b)[0]
            c = co.E2 * a + co.Q * (2.0 * n3 - n1)
            n4 = nonlin(c)[0]
            state = co.E * state + co.f1 * n1 + co.f2 * (n2 + n3) + co.f3 * n4
        t = t_start + (step + 1) * dt
        if (step + 1) % log_cadence == 0 or step + 1 == n_steps:
            nsq = log_state(t, state)
            if nsq > blowup_factor ** 2 * norm0_sq:
                raise BlowUpError(
                    f"norm grew {math.sqrt(nsq / norm0_sq):.3g}x initial at t={t:g}",
                    time=t, norm_ratio=math.sqrt(nsq / max(norm0_sq, 1e-300)))
    final = SpectralField(grid, _full_from_half(grid, state), t)
    if keep_fields and logged_times and logged_times[0] == t_start:
        logged_times = logged_times[1:]
        logged_fields = logged_fields[1:]
    traj = None
    if keep_fields and logged_fields:
        traj = TrajectoryGrid(np.asarray(logged_times), logged_fields,
                              initial=u0 if t_start == 0.0 else None)
    return MarchResult(traj, log, final)


def march_to_times(u0: SpectralField, times: np.ndarray, dt_max: float,
                   cfg: ModelConfig, workers: int = 1) -> TrajectoryGrid:
    """March segment-by-segment so the solution lands exactly on the given
    nodes (each segment substeps uniformly with dt <= dt_max)."""
    times = np.asarray(times, dtype=np.float64)
    fields = []
    current = u0
    t_prev = 0.0
    for t in times:
        n_sub = max(1, int(math.ceil((t - t_prev) / dt_max - 1e-12)))
        res = march(current, (t_prev, t), (t - t_prev) / n_sub, cfg,
                    workers=workers)
        current = res.final
        fields.append(current)
        t_prev = t
    return TrajectoryGrid(times.copy(), fields,
                          initial=u0)
