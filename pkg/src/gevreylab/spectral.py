"""Discrete Fourier representation of periodic 3-component vector fields.

Conventions (fixed once for the whole package):

* torus coefficients  u_hat(k) = L^-3 * integral( u(x) exp(-i k.x) dx ),
  so Parseval reads  ||u||_L2^2 = L^3 * sum_k |u_hat(k)|^2;
* wavenumbers k = (2*pi/L) * m with integer m per axis in [-n/2, n/2);
* physical sample points x_j = j*L/n in [0, L);
* dealiasing keeps |m_i| <= floor(dealias * n/2) per axis (2/3 rule by
  default), which makes quadratic products alias-free on retained modes.

All operators used downstream (fractional powers of A = sqrt(-Laplace),
heat semigroup, Gevrey weight, Leray projection) act mode-diagonally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as _fft

from .errors import GridError, GridMismatchError, UnreliableWeightError

__all__ = [
    "WavenumberGrid",
    "SpectralField",
    "ModelConfig",
    "MultiplierSpec",
    "build_grid",
    "to_spectral",
    "to_physical",
    "apply_multiplier",
    "multiplier_values",
    "leray_project",
    "divergence_max",
    "nonlinear_term",
    "norm_l2",
    "physical_l2_norm",
    "besov_shell_norm",
    "compensated_sum",
    "hermitian_symmetrize",
    "random_field",
    "taylor_green",
    "field_from_modes",
    "burgers_config",
    "navier_stokes_config",
    "heat_config",
    "scalar_random",
    "scalar_norm",
    "scalar_product",
]

GEVREY_EXPONENT_CAP = 600.0
NOISE_FLOOR = 1e-16
NOISE_AMPLIFICATION_LIMIT = 1e-3


# ---------------------------------------------------------------------------
# summation
# ---------------------------------------------------------------------------

def compensated_sum(values: np.ndarray) -> float:
    """Deterministic pairwise reduction with Neumaier compensation.

    The reduction tree is fixed by the input order, so results do not
    depend on thread count or chunking upstream.
    """
    s = np.asarray(values, dtype=np.float64).ravel()
    if s.size == 0:
        return 0.0
    carry = np.zeros_like(s)
    while s.size > 1:
        if s.size % 2:
            s = np.append(s, 0.0)
            carry = np.append(carry, 0.0)
        a, b = s[0::2], s[1::2]
        t = a + b
        # Neumaier branch-free error term of a+b
        err = np.where(np.abs(a) >= np.abs(b), (a - t) + b, (b - t) + a)
        carry = carry[0::2] + carry[1::2] + err
        s = t
    return float(s[0] + carry[0])


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WavenumberGrid:
    """Cubic periodic wavenumber grid with dealias metadata."""

    n_per_axis: int
    box_length: float
    dealias_fraction: float = 2.0 / 3.0

    def __post_init__(self):
        n = self.n_per_axis
        if n % 2 != 0 or n < 4:
            raise GridError(f"n_per_axis must be even and >= 4, got {n}")
        if not self.box_length > 0:
            raise GridError(f"box_length must be positive, got {self.box_length}")
        if not 0 < self.dealias_fraction <= 1:
            raise GridError(
                f"dealias_fraction must lie in (0, 1], got {self.dealias_fraction}"
            )
        m1 = np.fft.fftfreq(n, 1.0 / n).astype(np.int64)
        mx, my, mz = np.meshgrid(m1, m1, m1, indexing="ij")
        object.__setattr__(self, "m_int", (mx, my, mz))
        dk = 2.0 * np.pi / self.box_length
        object.__setattr__(self, "dk", dk)
        k_sq = dk * dk * (mx * mx + my * my + mz * mz).astype(np.float64)
        object.__setattr__(self, "k_sq", k_sq)
        object.__setattr__(self, "k_abs", np.sqrt(k_sq))
        m_cut = int(math.floor(self.dealias_fraction * n / 2.0))
        object.__setattr__(self, "m_cut", m_cut)
        mask = (
            (np.abs(mx) <= m_cut) & (np.abs(my) <= m_cut) & (np.abs(mz) <= m_cut)
        )
        object.__setattr__(self, "dealias_mask", mask)
        object.__setattr__(self, "k_max_retained", dk * math.sqrt(3) * m_cut)
        object.__setattr__(self, "k_axis_max", dk * m_cut)
        # index map m -> -m (mod n) for Hermitian symmetry checks
        neg = (n - np.arange(n)) % n
        object.__setattr__(self, "_neg_index", neg)
        # cached half-spectrum (rfft layout) arrays used by the hot paths
        nh = n // 2 + 1
        kxh = dk * mx[:, :, :nh].astype(np.float64)
        kyh = dk * my[:, :, :nh].astype(np.float64)
        kzh = dk * mz[:, :, :nh].astype(np.float64)
        object.__setattr__(self, "_half_kvec", (kxh, kyh, kzh))
        ksqh = kxh * kxh + kyh * kyh + kzh * kzh
        object.__setattr__(self, "_half_ksq", ksqh)
        with np.errstate(divide="ignore"):
            invh = np.where(ksqh > 0, 1.0 / np.where(ksqh > 0, ksqh, 1.0), 0.0)
        object.__setattr__(self, "_half_inv_ksq", invh)
        gx, gy, gz = kxh.copy(), kyh.copy(), kzh.copy()
        if m_cut >= n // 2:
            # unpaired Nyquist modes carry no well-defined first derivative
            half_nyq = dk * (n // 2)
            gx[np.abs(gx) == half_nyq] = 0.0
            gy[np.abs(gy) == half_nyq] = 0.0
            gz[np.abs(gz) == half_nyq] = 0.0
        object.__setattr__(self, "_half_grad", (1j * gx, 1j * gy, 1j * gz))
        object.__setattr__(self, "_half_mask", mask[:, :, :nh])
        # Hermitian multiplicity of half-spectrum entries in full-cube sums
        wz = np.full(nh, 2.0)
        wz[0] = 1.0
        if n % 2 == 0:
            wz[-1] = 1.0
        object.__setattr__(self, "_half_weight", wz[None, None, :])

    @property
    def shape(self) -> tuple:
        n = self.n_per_axis
        return (n, n, n)

    def physical_points(self):
        """Sample coordinates x_j = j*L/n along one axis."""
        n = self.n_per_axis
        return np.arange(n) * (self.box_length / n)

    def meshgrid(self):
        x = self.physical_points()
        return np.meshgrid(x, x, x, indexing="ij")

    def wrapped_meshgrid(self):
        """Minimum-image coordinates in [-L/2, L/2), for sampling fields
        centered at the origin of the torus."""
        L = self.box_length
        x = self.physical_points()
        xc = x - L * np.round(x / L)
        return np.meshgrid(xc, xc, xc, indexing="ij")

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape + (3,), dtype=np.complex128)


def build_grid(n: int, L: float, dealias: float = 2.0 / 3.0) -> WavenumberGrid:
    return WavenumberGrid(n_per_axis=n, box_length=L, dealias_fraction=dealias)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpectralField:
    """Fourier coefficients of a real 3-component vector field.

    coeffs has shape (n, n, n, 3) in numpy fftfreq mode ordering. Fields are
    treated as immutable values; operations return new instances.
    """

    grid: WavenumberGrid
    coeffs: np.ndarray
    time_tag: float = 0.0

    def __post_init__(self):
        expected = self.grid.shape + (3,)
        if self.coeffs.shape != expected:
            raise GridError(
                f"coefficient array has shape {self.coeffs.shape}, expected {expected}"
            )

    def with_coeffs(self, coeffs: np.ndarray, time_tag: float | None = None) -> "SpectralField":
        return SpectralField(self.grid, coeffs,
                             self.time_tag if time_tag is None else time_tag)

    def copy(self) -> "SpectralField":
        return self.with_coeffs(self.coeffs.copy())

    def hermitian_defect(self) -> float:
        """max |u_hat(k) - conj(u_hat(-k))| relative to max |u_hat|."""
        neg = self.grid._neg_index
        mirrored = np.conj(self.coeffs[np.ix_(neg, neg, neg)])
        scale = np.abs(self.coeffs).max()
        if scale == 0:
            return 0.0
        return float(np.abs(self.coeffs - mirrored).max() / scale)

    def __add__(self, other: "SpectralField") -> "SpectralField":
        _check_same_grid(self, other)
        return self.with_coeffs(self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        _check_same_grid(self, other)
        return self.with_coeffs(self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> "SpectralField":
        return self.with_coeffs(self.coeffs * scalar)

    __rmul__ = __mul__


def _check_same_grid(a: SpectralField, b: SpectralField):
    if a.grid != b.grid:
        raise GridMismatchError("fields live on different grids")


def hermitian_symmetrize(grid: WavenumberGrid, coeffs: np.ndarray) -> np.ndarray:
    neg = grid._neg_index
    return 0.5 * (coeffs + np.conj(coeffs[np.ix_(neg, neg, neg)]))


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def to_spectral(grid: WavenumberGrid, samples: np.ndarray, time_tag: float = 0.0,
                dealias: bool = True) -> SpectralField:
    """Analyze physical samples of shape (n, n, n, 3) into coefficients."""
    if samples.shape != grid.shape + (3,):
        raise GridError(
            f"sample array has shape {samples.shape}, expected {grid.shape + (3,)}"
        )
    n3 = grid.n_per_axis ** 3
    coeffs = _fft.fftn(samples, axes=(0, 1, 2)) / n3
    if dealias:
        coeffs = coeffs * grid.dealias_mask[..., None]
    return SpectralField(grid, coeffs, time_tag)


def to_physical(f: SpectralField) -> np.ndarray:
    """Synthesize physical samples (real part; imaginary part is round-off
    for Hermitian fields)."""
    n3 = f.grid.n_per_axis ** 3
    out = _fft.ifftn(f.coeffs, axes=(0, 1, 2)) * n3
    return np.ascontiguousarray(out.real)


# half-spectrum (rfft layout) helpers used by the time stepper for speed

def _half_from_full(grid: WavenumberGrid, coeffs: np.ndarray) -> np.ndarray:
    nh = grid.n_per_axis // 2 + 1
    return np.ascontiguousarray(coeffs[:, :, :nh, :])


def _full_from_half(grid: WavenumberGrid, half: np.ndarray) -> np.ndarray:
    n = grid.n_per_axis
    nh = n // 2 + 1
    out = np.empty(grid.shape + (3,), dtype=np.complex128)
    out[:, :, :nh, :] = half
    neg = grid._neg_index
    src = np.conj(half[np.ix_(neg, neg, np.arange(1, n // 2))])
    out[:, :, nh:, :] = src[:, :, ::-1, :]
    return out


def _synthesize_half(grid: WavenumberGrid, half: np.ndarray, workers: int = 1) -> np.ndarray:
    """Physical samples from half-spectrum coefficients, one array per call
    of shape (n, n, n, ncomp)."""
    n = grid.n_per_axis
    return _fft.irfftn(half, s=(n, n, n), axes=(0, 1, 2), workers=workers) * (n ** 3)


def _analyze_half(grid: WavenumberGrid, phys: np.ndarray, workers: int = 1) -> np.ndarray:
    n3 = grid.n_per_axis ** 3
    return _fft.rfftn(phys, axes=(0, 1, 2), workers=workers) / n3


# ---------------------------------------------------------------------------
# model configuration
# ---------------------------------------------------------------------------

LERAY = "leray"
IDENTITY = "identity"


@dataclass(frozen=True)
class ModelConfig:
    """Matrix M and projection choice of the advection model P(Mu.grad)u."""

    M: np.ndarray = field(default_factory=lambda: np.eye(3))
    projection: str = LERAY
    zero_mode_rule: str = IDENTITY  # P(0) := I; the mean mode evolves freely

    def __post_init__(self):
        M = np.asarray(self.M, dtype=np.float64)
        if M.shape != (3, 3) or not np.all(np.isfinite(M)):
            raise GridError("M must be a finite 3x3 matrix")
        object.__setattr__(self, "M", M)
        if self.projection not in (LERAY, IDENTITY):
            raise GridError(f"unknown projection {self.projection!r}")
        if self.zero_mode_rule not in (IDENTITY, "zero"):
            raise GridError(f"unknown zero_mode_rule {self.zero_mode_rule!r}")

    @property
    def is_linear(self) -> bool:
        return not self.M.any()


def burgers_config() -> ModelConfig:
    return ModelConfig(M=np.eye(3), projection=IDENTITY)


def navier_stokes_config() -> ModelConfig:
    return ModelConfig(M=np.eye(3), projection=LERAY)


def heat_config() -> ModelConfig:
    return ModelConfig(M=np.zeros((3, 3)), projection=IDENTITY)


# ---------------------------------------------------------------------------
# multipliers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MultiplierSpec:
    """Diagonal Fourier multiplier m(|k|).

    kinds: "frac_power" (|k|^r, zero mode mapped to 0 for r < 0),
    "inhom_frac_power" ((1+|k|^2)^{r/2}), "heat" (exp(-t |k|^2)),
    "gevrey" (exp(theta |k|), guarded), "composite" (product of parts).
    """

    kind: str
    parameter: float = 0.0
    parts: tuple = ()

    @staticmethod
    def identity() -> "MultiplierSpec":
        return MultiplierSpec("frac_power", 0.0)

    @staticmethod
    def frac_power(r: float) -> "MultiplierSpec":
        return MultiplierSpec("frac_power", r)

    @staticmethod
    def inhom_frac_power(r: float) -> "MultiplierSpec":
        return MultiplierSpec("inhom_frac_power", r)

    @staticmethod
    def heat(t: float) -> "MultiplierSpec":
        if t < 0:
            raise ValueError("heat time must be >= 0")
        return MultiplierSpec("heat", t)

    @staticmethod
    def gevrey(theta: float) -> "MultiplierSpec":
        if theta < 0:
            raise ValueError("gevrey weight must be >= 0")
        return MultiplierSpec("gevrey", theta)

    @staticmethod
    def composite(*parts: "MultiplierSpec") -> "MultiplierSpec":
        return MultiplierSpec("composite", 0.0, tuple(parts))

    def gevrey_total(self) -> float:
        if self.kind == "gevrey":
            return self.parameter
        if self.kind == "composite":
            return sum(p.gevrey_total() for p in self.parts)
        return 0.0


def _values_on(k_abs: np.ndarray, k_sq: np.ndarray, spec: MultiplierSpec) -> np.ndarray:
    if spec.kind == "frac_power":
        r = spec.parameter
        if r == 0.0:
            return np.ones_like(k_abs)
        with np.errstate(divide="ignore"):
            vals = np.where(k_abs > 0, k_abs, 1.0) ** r
        vals = np.where(k_abs > 0, vals, 0.0)
        return vals
    if spec.kind == "inhom_frac_power":
        return (1.0 + k_sq) ** (spec.parameter / 2.0)
    if spec.kind == "heat":
        return np.exp(-spec.parameter * k_sq)
    if spec.kind == "gevrey":
        return np.exp(spec.parameter * k_abs)
    if spec.kind == "composite":
        out = np.ones_like(k_abs)
        for p in spec.parts:
            out = out * _values_on(k_abs, k_sq, p)
        return out
    raise ValueError(f"unknown multiplier kind {spec.kind!r}")


def _check_gevrey_static(grid: WavenumberGrid, spec: MultiplierSpec):
    theta = spec.gevrey_total()
    if theta * grid.k_max_retained > GEVREY_EXPONENT_CAP:
        raise UnreliableWeightError(
            f"gevrey weight theta={theta:g} exceeds overflow guard "
            f"(theta * k_max = {theta * grid.k_max_retained:g} > {GEVREY_EXPONENT_CAP:g})",
            admissible_max=GEVREY_EXPONENT_CAP / grid.k_max_retained,
        )


def multiplier_values(grid: WavenumberGrid, spec: MultiplierSpec) -> np.ndarray:
    """Multiplier values on the full grid (guard against Gevrey overflow)."""
    _check_gevrey_static(grid, spec)
    return _values_on(grid.k_abs, grid.k_sq, spec)


def apply_multiplier(f: SpectralField, spec: MultiplierSpec) -> SpectralField:
    vals = multiplier_values(f.grid, spec)
    return f.with_coeffs(f.coeffs * vals[..., None])


# ---------------------------------------------------------------------------
# norms and shells
# ---------------------------------------------------------------------------

def _weighted_power(f: SpectralField, spec: MultiplierSpec | None) -> np.ndarray:
    w = f.coeffs
    if spec is not None:
        w = w * multiplier_values(f.grid, spec)[..., None]
    return (w.real ** 2 + w.imag ** 2)


def norm_l2(f: SpectralField, spec: MultiplierSpec | None = None) -> float:
    """sqrt(L^3 * sum |m(|k|) u_hat(k)|^2) with deterministic compensated
    summation in fixed lexicographic mode order.

    Raises UnreliableWeightError when a Gevrey factor would amplify the
    machine-noise floor past 1e-3 of the computed norm.
    """
    power = _weighted_power(f, spec)
    total = compensated_sum(power)
    L3 = f.grid.box_length ** 3
    value = math.sqrt(max(total, 0.0) * L3)
    theta = spec.gevrey_total() if spec is not None else 0.0
    if theta > 0.0 and value > 0.0:
        plain = math.sqrt(max(compensated_sum(f.coeffs.real ** 2 + f.coeffs.imag ** 2), 0.0) * L3)
        noise = math.exp(theta * f.grid.k_max_retained) * NOISE_FLOOR * plain
        if noise > NOISE_AMPLIFICATION_LIMIT * value:
            theta_max = _admissible_theta(f, theta)
            raise UnreliableWeightError(
                f"gevrey weight theta={theta:g} amplifies round-off noise to "
                f"{noise / value:.2e} of the norm (limit {NOISE_AMPLIFICATION_LIMIT:g})",
                admissible_max=theta_max,
            )
    return value


def _admissible_theta(f: SpectralField, theta_bad: float) -> float:
    """Largest theta on a downward scan that passes both guard conditions."""
    static_cap = GEVREY_EXPONENT_CAP / f.grid.k_max_retained
    plain_power = f.coeffs.real ** 2 + f.coeffs.imag ** 2
    L3 = f.grid.box_length ** 3
    plain = math.sqrt(max(compensated_sum(plain_power), 0.0) * L3)
    kk = f.grid.k_abs[..., None]
    for theta in np.linspace(min(theta_bad, static_cap), 0.0, 64):
        if theta == 0.0:
            return 0.0
        value = math.sqrt(max(compensated_sum(plain_power * np.exp(2 * theta * kk)), 0.0) * L3)
        if math.exp(theta * f.grid.k_max_retained) * NOISE_FLOOR * plain <= NOISE_AMPLIFICATION_LIMIT * value:
            return float(theta)
    return 0.0


def physical_l2_norm(f: SpectralField) -> float:
    """Physical-space quadrature route: sqrt((L/n)^3 sum |u(x_j)|^2)."""
    u = to_physical(f)
    h3 = (f.grid.box_length / f.grid.n_per_axis) ** 3
    return math.sqrt(max(compensated_sum(u ** 2), 0.0) * h3)


def besov_shell_norm(f: SpectralField) -> list:
    """Dyadic shell values 2^{q/2} (L^3 sum_{2^q <= |k| < 2^{q+1}} |u_hat|^2)^{1/2}.

    Returns [(q, value)] for every dyadic shell intersecting the retained,
    nonzero-wavenumber ball. The homogeneous-Besov surrogate norm is the
    max over q.
    """
    grid = f.grid
    k = grid.k_abs
    power = (f.coeffs.real ** 2 + f.coeffs.imag ** 2).sum(axis=-1)
    pos = (k > 0) & grid.dealias_mask
    if not pos.any():
        return []
    kmin = k[pos].min()
    kmax = k[pos].max()
    q_lo = int(math.floor(math.log2(kmin)))
    q_hi = int(math.floor(math.log2(kmax)))
    L3 = grid.box_length ** 3
    out = []
    for q in range(q_lo, q_hi + 1):
        sel = pos & (k >= 2.0 ** q) & (k < 2.0 ** (q + 1))
        mass = compensated_sum(power[sel]) * L3 if sel.any() else 0.0
        out.append((q, 2.0 ** (q / 2.0) * math.sqrt(max(mass, 0.0))))
    return out


# ---------------------------------------------------------------------------
# Leray projection and the advective nonlinearity
# ---------------------------------------------------------------------------

def _project_half(grid: WavenumberGrid, half: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    if cfg.projection != LERAY:
        return half
    kx, ky, kz = grid._half_kvec
    dot = (kx * half[..., 0] + ky * half[..., 1] + kz * half[..., 2]) * grid._half_inv_ksq
    out = half.copy()
    out[..., 0] -= dot * kx
    out[..., 1] -= dot * ky
    out[..., 2] -= dot * kz
    if cfg.zero_mode_rule == "zero":
        out[0, 0, 0, :] = 0.0
    return out


def leray_project(f: SpectralField, cfg: ModelConfig | None = None) -> SpectralField:
    """Per-mode orthogonal projection (I - k k^T/|k|^2) u_hat(k).

    The k = 0 fiber follows cfg.zero_mode_rule (identity by default, since
    the projection is only defined for k != 0).
    """
    grid = f.grid
    k = grid.k_abs
    dk = grid.dk
    mx, my, mz = grid.m_int
    kvec = np.stack([dk * mx, dk * my, dk * mz], axis=-1).astype(np.float64)
    ksq = grid.k_sq
    with np.errstate(invalid="ignore", divide="ignore"):
        inv = np.where(ksq > 0, 1.0 / np.where(ksq > 0, ksq, 1.0), 0.0)
    dot = (kvec * f.coeffs).sum(axis=-1) * inv
    out = f.coeffs - dot[..., None] * kvec
    rule = cfg.zero_mode_rule if cfg is not None else IDENTITY
    if rule == "zero":
        out[0, 0, 0, :] = 0.0
    else:
        out[0, 0, 0, :] = f.coeffs[0, 0, 0, :]
    return f.with_coeffs(out)


def divergence_max(f: SpectralField) -> float:
    """max_k |k . u_hat(k)| over retained modes (0 for divergence-free)."""
    grid = f.grid
    dk = grid.dk
    mx, my, mz = grid.m_int
    div = dk * (mx * f.coeffs[..., 0] + my * f.coeffs[..., 1] + mz * f.coeffs[..., 2])
    return float(np.abs(div * grid.dealias_mask).max())


def _nonlinear_half(grid: WavenumberGrid, u_half: np.ndarray, v_half: np.ndarray,
                    cfg: ModelConfig, workers: int = 1,
                    return_velocity: bool = False):
    """Half-spectrum coefficients of P(Mu . grad) v, dealiased.

    Advection form: synthesize Mu and the nine derivatives of v, multiply
    pointwise, analyze, dealias, project.
    """
    mask = grid._half_mask
    U = _synthesize_half(grid, u_half, workers)
    W = U @ cfg.M.T
    ikx, iky, ikz = grid._half_grad
    conv = np.empty_like(U)
    for i in range(3):
        vi = v_half[..., i]
        acc = W[..., 0] * _synthesize_half(grid, ikx * vi, workers)
        acc += W[..., 1] * _synthesize_half(grid, iky * vi, workers)
        acc += W[..., 2] * _synthesize_half(grid, ikz * vi, workers)
        conv[..., i] = acc
    out = _analyze_half(grid, conv, workers)
    out *= mask[..., None]
    out = _project_half(grid, out, cfg)
    if return_velocity:
        return out, W
    return out


def _nonlinear_half_divform(grid: WavenumberGrid, u_half: np.ndarray,
                            cfg: ModelConfig, workers: int = 1,
                            return_velocity: bool = False):
    """Divergence-form fast path for self-advection with div(Mu) = 0:
    (u.grad)u_i = sum_j d_j(u_j u_i). Valid for the Leray model with M = I;
    agrees with the advection form on retained modes."""
    mask = grid._half_mask
    U = _synthesize_half(grid, u_half, workers)
    ik = grid._half_grad
    prods = {}
    for i in range(3):
        for j in range(i, 3):
            prods[(i, j)] = _analyze_half(grid, U[..., i] * U[..., j], workers)
    out = np.empty_like(u_half)
    for i in range(3):
        acc = None
        for j in range(3):
            pij = prods[(min(i, j), max(i, j))]
            term = ik[j] * pij
            acc = term if acc is None else acc + term
        out[..., i] = acc
    out *= mask[..., None]
    out = _project_half(grid, out, cfg)
    if return_velocity:
        return out, U
    return out


def nonlinear_term(u: SpectralField, v: SpectralField, cfg: ModelConfig,
                   workers: int = 1) -> SpectralField:
    """Spectral coefficients of P(Mu . grad) v, computed pseudospectrally
    with exact dealiasing on the retained ball."""
    _check_same_grid(u, v)
    grid = u.grid
    uh = _half_from_full(grid, u.coeffs)
    vh = uh if v is u else _half_from_full(grid, v.coeffs)
    out_h = _nonlinear_half(grid, uh, vh, cfg, workers)
    return SpectralField(grid, _full_from_half(grid, out_h), v.time_tag)


# ---------------------------------------------------------------------------
# canned fields
# ---------------------------------------------------------------------------

def field_from_modes(grid: WavenumberGrid, modes: dict, time_tag: float = 0.0) -> SpectralField:
    """Build a Hermitian field from {(m1,m2,m3): (c1,c2,c3)} mode entries;
    the conjugate partners are filled in automatically."""
    n = grid.n_per_axis
    coeffs = grid.zeros()
    for m, amp in modes.items():
        idx = tuple(int(mi) % n for mi in m)
        coeffs[idx] += np.asarray(amp, dtype=np.complex128)
        nidx = tuple((-int(mi)) % n for mi in m)
        coeffs[nidx] += np.conj(np.asarray(amp, dtype=np.complex128))
    return SpectralField(grid, coeffs * grid.dealias_mask[..., None], time_tag)


def taylor_green(grid: WavenumberGrid, amplitude: float = 1.0) -> SpectralField:
    """Divergence-free trigonometric initial datum
    u = A (sin x cos y cos z, -cos x sin y cos z, 0), built spectrally.

    Eight modes per component: coefficient at (sx, sy, sz) is
    (-i A sx / 8, +i A sy / 8, 0)."""
    c = amplitude / 8.0
    n = grid.n_per_axis
    coeffs = grid.zeros()
    for sx in (1, -1):
        for sy in (1, -1):
            for sz in (1, -1):
                idx = (sx % n, sy % n, sz % n)
                coeffs[idx + (0,)] = -1j * c * sx
                coeffs[idx + (1,)] = 1j * c * sy
    return SpectralField(grid, coeffs * grid.dealias_mask[..., None], 0.0)


def random_field(grid: WavenumberGrid, beta: float, seed: int,
                 mean_zero: bool = True, band: tuple | None = None,
                 cfg: ModelConfig | None = None,
                 normalize: float | None = None,
                 scalar: bool = False) -> SpectralField:
    """Seeded random field with |u_hat(k)| ∝ |k|^{-beta}, independent uniform
    phases, Hermitian symmetry enforced.

    band = (k_lo, k_hi) restricts support; cfg with Leray projection makes the
    sample divergence-free; normalize rescales to a target L2 norm. With
    scalar=True the same scalar sample is placed in all three components
    (useful for product-bound experiments on scalar functions).
    """
    rng = np.random.default_rng(seed)
    shape = grid.shape + (3,)
    raw = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    if scalar:
        raw[..., 1] = raw[..., 0]
        raw[..., 2] = raw[..., 0]
    sym = hermitian_symmetrize(grid, raw)
    k = grid.k_abs
    with np.errstate(divide="ignore"):
        target = np.where(k > 0, np.where(k > 0, k, 1.0) ** (-beta), 0.0 if mean_zero else 1.0)
    mag = np.abs(sym)
    scale = np.where(mag > 0, target[..., None] / np.where(mag > 0, mag, 1.0), 0.0)
    coeffs = sym * scale
    if band is not None:
        sel = (k >= band[0]) & (k <= band[1])
        coeffs = coeffs * sel[..., None]
    if mean_zero:
        coeffs[0, 0, 0, :] = 0.0
    coeffs = coeffs * grid.dealias_mask[..., None]
    f = SpectralField(grid, coeffs)
    if cfg is not None and cfg.projection == LERAY:
        f = leray_project(f, cfg)
    if normalize is not None:
        cur = norm_l2(f)
        if cur > 0:
            f = f * (normalize / cur)
    return f


# ---------------------------------------------------------------------------
# scalar helpers (product-bound experiments on scalar functions)
# ---------------------------------------------------------------------------

def scalar_random(grid: WavenumberGrid, beta: float, seed: int,
                  band: tuple | None = None) -> np.ndarray:
    """Mean-zero Hermitian scalar coefficients with |c(k)| ∝ |k|^{-beta}."""
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    neg = grid._neg_index
    sym = 0.5 * (raw + np.conj(raw[np.ix_(neg, neg, neg)]))
    k = grid.k_abs
    with np.errstate(divide="ignore"):
        target = np.where(k > 0, np.where(k > 0, k, 1.0) ** (-beta), 0.0)
    mag = np.abs(sym)
    c = sym * np.where(mag > 0, target / np.where(mag > 0, mag, 1.0), 0.0)
    if band is not None:
        c = c * ((k >= band[0]) & (k <= band[1]))
    c[0, 0, 0] = 0.0
    return c * grid.dealias_mask


def scalar_norm(grid: WavenumberGrid, c: np.ndarray,
                spec: MultiplierSpec | None = None) -> float:
    w = c if spec is None else c * multiplier_values(grid, spec)
    total = compensated_sum(w.real ** 2 + w.imag ** 2)
    return math.sqrt(max(total, 0.0) * grid.box_length ** 3)


def scalar_product(grid: WavenumberGrid, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Coefficients of the pointwise product of two scalar fields (dealiased)."""
    n3 = grid.n_per_axis ** 3
    fa = _fft.ifftn(a) * n3
    fb = _fft.ifftn(b) * n3
    return (_fft.fftn(fa * fb) / n3) * grid.dealias_mask
