"""Synthetic positive-pair kernels with known spectra and a paired sampler.

A kernel is K(a, a') = sum_i lambda_i psi_i(a) psi_i(a') on [-1, 1]^p with
psi_i an orthonormal tensor-product family (Legendre or Fourier) under the
uniform marginal P_A = 1/2^p, and lambda_1 = 1 for the constant psi_1 == 1.
The joint density of a positive pair is P+(a, a') = K(a, a') / 2^(2p); it is
a valid probability density whenever the eigenvalue ladder satisfies the
peak bound checked by :func:`validity_check`.

Pairs are drawn exactly: a ~ uniform, then a' | a by rejection with a uniform
proposal and envelope M = 1 + sum_{i>=2} lambda_i B_i^p, where B_i bounds
|psi_i| pointwise. The validity bound forces M <= 2, so the expected number
of proposals per accepted sample never exceeds two.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ContractViolation, RngState

__all__ = [
    "KernelSpec",
    "SampleBatch",
    "ValidityReport",
    "make_kernel",
    "basis_eval",
    "basis_matrix",
    "kernel_eval",
    "kernel_matrix",
    "validity_check",
    "envelope_constant",
    "sample_pairs",
]

LEGENDRE = "legendre"
FOURIER = "fourier"


@dataclass(frozen=True)
class KernelSpec:
    """Analytic definition of a rank-r synthetic kernel."""

    kind: str
    p: int
    r: int
    eigenvalues: np.ndarray = field(repr=False)  # (r,), lambda[0] == 1

    def __post_init__(self):
        if self.kind not in (LEGENDRE, FOURIER):
            raise ContractViolation(f"unknown kernel kind {self.kind!r}")
        if self.p < 1 or self.r < 1:
            raise ContractViolation("kernel requires p >= 1 and r >= 1")
        lam = np.asarray(self.eigenvalues, dtype=np.float64)
        if lam.shape != (self.r,):
            raise ContractViolation("eigenvalue vector length must equal r")
        if abs(lam[0] - 1.0) > 1e-12:
            raise ContractViolation("top eigenvalue must be 1 (constant eigenfunction)")
        if np.any(lam <= 0) or np.any(np.diff(lam) > 1e-12):
            raise ContractViolation("eigenvalues must be positive and non-increasing")
        object.__setattr__(self, "eigenvalues", lam)

    def peak_bounds(self) -> np.ndarray:
        """Squared sup norms sup|psi_i|^2, the weights in the validity bound."""
        return _peak_bounds(self.kind, self.p, self.r)


def _peak_bounds(kind: str, p: int, r: int) -> np.ndarray:
    # sup|psi_i|^2: (2i-1)^p for Legendre, 2^p for Fourier, 1 for the constant
    i = np.arange(1, r + 1)
    if kind == LEGENDRE:
        sup_sq = (2.0 * i - 1.0) ** p
    else:
        sup_sq = np.full(r, 2.0**p)
    sup_sq[0] = 1.0
    return sup_sq


def make_kernel(kind: str, p: int, r: int, decay_rate: float = 0.3) -> KernelSpec:
    """Exponentially decaying ladder, saturating the validity bound.

    lambda_1 = 1; for i >= 2, lambda_i = c * exp(-decay_rate * i) with c the
    largest constant keeping P+ a valid density (equality in the bound).
    """
    if decay_rate <= 0:
        raise ContractViolation("decay_rate must be positive")
    if r < 1 or p < 1:
        raise ContractViolation("make_kernel requires r >= 1 and p >= 1")
    lam = np.ones(r)
    if r > 1:
        i = np.arange(2, r + 1)
        bounds = _peak_bounds(kind, p, r)[1:]
        raw = np.exp(-decay_rate * i)
        c = 1.0 / float(bounds @ raw)
        lam[1:] = c * raw
    return KernelSpec(kind=kind, p=p, r=r, eigenvalues=lam)


def _legendre_table(x: np.ndarray, max_degree: int) -> np.ndarray:
    """P_0 .. P_max at every point in one recurrence pass: (m,) -> (m, deg+1)."""
    table = np.empty((x.shape[0], max_degree + 1))
    table[:, 0] = 1.0
    if max_degree >= 1:
        table[:, 1] = x
    for k in range(1, max_degree):
        table[:, k + 1] = ((2 * k + 1) * x * table[:, k] - k * table[:, k - 1]) / (k + 1)
    return table


def basis_matrix(spec: KernelSpec, points: np.ndarray) -> np.ndarray:
    """All r basis values at each point: (m, p) -> (m, r)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[1] != spec.p:
        raise ContractViolation(f"points must have {spec.p} coordinates")
    if np.any(np.abs(pts) > 1.0 + 1e-12):
        raise ContractViolation("points outside [-1, 1]^p")
    if spec.kind == LEGENDRE:
        scale = np.sqrt(2.0 * np.arange(1, spec.r + 1) - 1.0)
        out = np.ones((pts.shape[0], spec.r))
        for j in range(spec.p):
            out *= scale * _legendre_table(pts[:, j], spec.r - 1)
    else:
        freqs = np.arange(spec.r) * np.pi
        out = np.ones((pts.shape[0], spec.r))
        for j in range(spec.p):
            axis = np.sqrt(2.0) * np.cos(pts[:, j, None] * freqs)
            axis[:, 0] = 1.0
            out *= axis
    return out


def basis_eval(spec: KernelSpec, i: int, a) -> np.ndarray | float:
    """psi_i at one or many points; i is 1-based, psi_1 == 1 exactly."""
    if not 1 <= i <= spec.r:
        raise ContractViolation(f"basis index {i} out of range [1, {spec.r}]")
    a = np.asarray(a, dtype=np.float64)
    scalar = a.ndim <= 1
    vals = basis_matrix(spec, a)[:, i - 1]
    return float(vals[0]) if scalar else vals


def kernel_eval(spec: KernelSpec, a, a2) -> np.ndarray | float:
    """K(a, a') row-wise for matched point arrays (or a single pair)."""
    a = np.asarray(a, dtype=np.float64)
    scalar = a.ndim <= 1
    pa = basis_matrix(spec, a)
    pb = basis_matrix(spec, a2)
    if pa.shape != pb.shape:
        raise ContractViolation("kernel_eval needs matched point arrays")
    vals = np.einsum("ij,ij->i", pa * spec.eigenvalues, pb)
    return float(vals[0]) if scalar else vals


def kernel_matrix(spec: KernelSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross kernel matrix K(a_i, b_j): (m, p) x (n, p) -> (m, n)."""
    pa = basis_matrix(spec, a)
    pb = basis_matrix(spec, b)
    return (pa * spec.eigenvalues) @ pb.T


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    margin: float


def validity_check(spec: KernelSpec) -> ValidityReport:
    """Margin of the density bound: 1 - sum_{i>=2} B_i^p lambda_i."""
    bounds = _peak_bounds(spec.kind, spec.p, spec.r)
    margin = 1.0 - float(bounds[1:] @ spec.eigenvalues[1:])
    return ValidityReport(valid=margin >= 0.0, margin=margin)


def envelope_constant(spec: KernelSpec) -> float:
    """Rejection envelope M >= sup K; M <= 2 for any valid spec."""
    bounds = _peak_bounds(spec.kind, spec.p, spec.r)
    return 1.0 + float(bounds[1:] @ spec.eigenvalues[1:])


@dataclass(frozen=True)
class SampleBatch:
    """Paired contexts: row i of ``aplus`` was drawn conditionally on row i of ``a``."""

    a: np.ndarray  # (m, p)
    aplus: np.ndarray  # (m, p)

    @property
    def m(self) -> int:
        return self.a.shape[0]


def sample_pairs(
    spec: KernelSpec, rng: RngState, m: int, *, return_trials: bool = False
):
    """Draw m exact pairs (a, a+) from P+ with uniform-proposal rejection.

    ``a`` rows are i.i.d. uniform on [-1, 1]^p; given a, the conditional
    density of a+ is K(a, a+) / 2^p. Deterministic for a fixed rng state.
    With ``return_trials`` also reports the total number of proposals, for
    acceptance-rate checks.
    """
    if m < 1:
        raise ContractViolation("sample_pairs requires m >= 1")
    gen = rng.generator()
    a = gen.uniform(-1.0, 1.0, size=(m, spec.p))
    aplus = np.empty_like(a)
    env = envelope_constant(spec)
    # K(a_i, prop) = <lambda-weighted basis(a_i), basis(prop)>; the a-side
    # factor is fixed across rejection rounds, so compute it once
    weighted = basis_matrix(spec, a) * spec.eigenvalues
    pending = np.arange(m)
    trials = 0
    while pending.size:
        k = pending.size
        proposal = gen.uniform(-1.0, 1.0, size=(k, spec.p))
        u = gen.uniform(size=k)
        density = np.einsum(
            "ij,ij->i", weighted[pending], basis_matrix(spec, proposal)
        )
        accept = u * env <= density
        aplus[pending[accept]] = proposal[accept]
        pending = pending[~accept]
        trials += k
    batch = SampleBatch(a=a, aplus=aplus)
    return (batch, trials) if return_trials else batch
