"""Batch estimators for the five training objectives, with output gradients.

Every loss maps encoder outputs Z (on the first view) and ZPlus (on the
paired view), both (m, d), to a scalar and exact gradients with respect to
those outputs. Network parameter gradients are obtained by chaining through
the tape; nothing here touches parameters.

Estimator conventions, shared across losses:

* positive terms average over the m aligned pairs;
* contrastive negative terms average over all m(m-1) cross pairs, diagonal
  excluded;
* penalty terms that square a population expectation use sample splitting:
  the batch's pair indices are partitioned into two halves (pairs stay
  together, so the halves are independent), the inner expectation is
  estimated once per half, and the two estimates are multiplied. That
  product is an unbiased estimator of the squared expectation; the naive
  squared batch mean is biased upward by its own variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractViolation, RngState

__all__ = [
    "LossOutput",
    "PenaltyConfig",
    "SplitScheme",
    "loss_scl",
    "loss_lora_svd",
    "loss_rq",
    "loss_vicreg",
    "loss_rq_direct",
    "OBJECTIVES",
]


@dataclass
class LossOutput:
    """Scalar objective and gradients w.r.t. the batch outputs.

    For the two-encoder SVD loss, ``grad_z`` is the gradient w.r.t. the
    x-side outputs and ``grad_zplus`` w.r.t. the context-side outputs.
    """

    value: float
    grad_z: np.ndarray
    grad_zplus: np.ndarray


@dataclass(frozen=True)
class PenaltyConfig:
    """Lagrangian weights for the constrained objectives."""

    mu: float = 10.0
    nu: float = 30.0
    vicreg_lambda: float = 1.0
    vicreg_eps: float = 1e-4

    def __post_init__(self):
        if self.mu <= 0 or self.nu <= 0:
            raise ContractViolation("penalty weights mu, nu must be positive")


@dataclass(frozen=True)
class SplitScheme:
    """Deterministic half/half partition of pair indices.

    Pairs are shuffled by a seeded permutation and assigned alternately, so
    both halves have m/2 pairs and the assignment is reproducible.
    """

    seed: int = 0

    def halves(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        if m < 4 or m % 2:
            raise ContractViolation("sample splitting requires an even batch, m >= 4")
        perm = RngState(self.seed).substream("split").generator().permutation(m)
        return perm[0::2], perm[1::2]


def _check_pair(z: np.ndarray, zplus: np.ndarray, min_m: int) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    zplus = np.asarray(zplus, dtype=np.float64)
    if z.ndim != 2 or z.shape != zplus.shape:
        raise ContractViolation(f"output shapes must match, got {z.shape} vs {zplus.shape}")
    if z.shape[0] < min_m:
        raise ContractViolation(f"batch size {z.shape[0]} below minimum {min_m}")
    return z, zplus


def _row_normalize(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return z / norms, norms


def _chain_through_normalize(z_hat: np.ndarray, norms: np.ndarray, grad_hat: np.ndarray) -> np.ndarray:
    # d/dz f(z/|z|) = (grad - (grad . zhat) zhat) / |z|
    radial = np.sum(grad_hat * z_hat, axis=1, keepdims=True)
    return (grad_hat - radial * z_hat) / norms


# ---------------------------------------------------------------------------
# contrastive / low-rank family
# ---------------------------------------------------------------------------


def _cross_square_terms(z: np.ndarray, p: np.ndarray):
    """Diagonal-excluded sum of squared cross inner products, and gradients.

    sum_{i != j} <Z_i, P_j>^2 = tr[(Z^T Z)(P^T P)] - sum_i <Z_i, P_i>^2,
    which costs O(m d^2) instead of materializing the m x m gram. Gradients:
    d/dZ = 2 (Z (P^T P) - diag(<Z_i, P_i>) P), symmetrically for P.
    """
    gz_gram = z.T @ z
    gp_gram = p.T @ p
    dots = np.einsum("ij,ij->i", z, p)
    total = float(np.einsum("ij,ij->", gz_gram, gp_gram)) - float(dots @ dots)
    dz = 2.0 * (z @ gp_gram - dots[:, None] * p)
    dp = 2.0 * (p @ gz_gram - dots[:, None] * z)
    return total, dz, dp, dots


def loss_scl(z, zplus, normalize: bool = False) -> LossOutput:
    """Spectral contrastive loss on positive pairs with in-batch negatives.

    value = -(1/m) sum_i <Z_i, ZPlus_i>
            + (1/2) (1/(m(m-1))) sum_{i != j} <Z_i, ZPlus_j>^2

    With ``normalize``, rows of both views are l2-normalized first and
    gradients are chained through the normalization.
    """
    z, zplus = _check_pair(z, zplus, 2)
    if normalize:
        z_hat, zn = _row_normalize(z)
        p_hat, pn = _row_normalize(zplus)
    else:
        z_hat, p_hat = z, zplus
    m = z_hat.shape[0]
    neg, dneg_z, dneg_p, dots = _cross_square_terms(z_hat, p_hat)
    value = -float(dots.mean()) + 0.5 * neg / (m * (m - 1))
    gz = -p_hat / m + 0.5 * dneg_z / (m * (m - 1))
    gp = -z_hat / m + 0.5 * dneg_p / (m * (m - 1))
    if normalize:
        gz = _chain_through_normalize(z_hat, zn, gz)
        gp = _chain_through_normalize(p_hat, pn, gp)
    return LossOutput(value=value, grad_z=gz, grad_zplus=gp)


def loss_lora_svd(zx, za) -> LossOutput:
    """Two-encoder low-rank approximation loss.

    value = -2 (1/m) sum_i <ZX_i, ZA_i>
            + (1/(m(m-1))) sum_{i != j} <ZX_i, ZA_j>^2

    Row i of ``zx`` and ``za`` must come from one joint draw; cross pairs
    serve as the independent product-of-marginals sample.
    """
    zx, za = _check_pair(zx, za, 2)
    m = zx.shape[0]
    neg, dneg_x, dneg_a, dots = _cross_square_terms(zx, za)
    value = -2.0 * float(dots.mean()) + neg / (m * (m - 1))
    gx = -2.0 * za / m + dneg_x / (m * (m - 1))
    ga = -2.0 * zx / m + dneg_a / (m * (m - 1))
    return LossOutput(value=value, grad_z=gx, grad_zplus=ga)


# ---------------------------------------------------------------------------
# Rayleigh-quotient family
# ---------------------------------------------------------------------------


def _marginal_moments(z, zplus, idx) -> np.ndarray:
    """Second-moment matrix over one half's pooled rows (both views).

    Normalized by m (= 2 * half pair count), the pooled row count.
    """
    m = z.shape[0]
    zh, ph = z[idx], zplus[idx]
    return (zh.T @ zh + ph.T @ ph) / m


def loss_rq(z, zplus, cfg: PenaltyConfig, split: SplitScheme) -> LossOutput:
    """Rayleigh-quotient loss with split-product orthonormality penalties.

    invariance  (1/m) sum_i |Z_i - ZPlus_i|^2
    variance    (mu/d) sum_i  (C1_ii - 1)(C2_ii - 1)
    covariance  (nu/(d(d-1))) sum_{i != j} C1_ij C2_ij

    where C_h is the marginal second-moment matrix of half h, pooled over
    both views. Requires d >= 2 for the covariance term (vanishes at d = 1).
    """
    z, zplus = _check_pair(z, zplus, 4)
    m, d = z.shape
    half1, half2 = split.halves(m)

    diff = z - zplus
    inv = float(np.sum(diff**2)) / m
    g_inv = 2.0 * diff / m

    c1 = _marginal_moments(z, zplus, half1)
    c2 = _marginal_moments(z, zplus, half2)
    var1, var2 = np.diag(c1) - 1.0, np.diag(c2) - 1.0
    pen_var = cfg.mu / d * float(var1 @ var2)

    offmask = 1.0 - np.eye(d)
    if d > 1:
        pen_cov = cfg.nu / (d * (d - 1)) * float(np.sum(c1 * c2 * offmask))
    else:
        pen_cov = 0.0

    # d(pen)/d(row in half h) = (2/m) row @ A_other, with A carrying the
    # variance weights on the diagonal and covariance weights off it
    def weight_matrix(c_other):
        a = (cfg.nu / (d * (d - 1)) if d > 1 else 0.0) * (c_other * offmask)
        a[np.diag_indices(d)] = cfg.mu / d * (np.diag(c_other) - 1.0)
        return a

    a2 = weight_matrix(c2)  # applied to half-1 rows
    a1 = weight_matrix(c1)
    gz = g_inv.copy()
    gp = -g_inv
    gz[half1] += (2.0 / m) * z[half1] @ a2
    gp[half1] += (2.0 / m) * zplus[half1] @ a2
    gz[half2] += (2.0 / m) * z[half2] @ a1
    gp[half2] += (2.0 / m) * zplus[half2] @ a1
    return LossOutput(value=inv + pen_var + pen_cov, grad_z=gz, grad_zplus=gp)


def loss_vicreg(z, zplus, cfg: PenaltyConfig) -> LossOutput:
    """VICReg with hinge variance and biased in-batch covariance.

    invariance  lambda (1/m) sum_i |Zt_i - ZtPlus_i|^2
    variance    (mu/d) sum_i relu(1 - sqrt(C_ii + eps))
    covariance  (nu/(d(d-1))) sum_{i != j} C_ij^2

    Zt centers both views by the first view's batch mean; C is the first
    view's empirical covariance with 1/(m-1). No sample splitting: the
    squared empirical moments are the (biased) estimators this objective is
    defined with.
    """
    z, zplus = _check_pair(z, zplus, 2)
    m, d = z.shape
    mean = z.mean(axis=0)
    zt = z - mean
    # the shared mean cancels in the invariance term and its gradient
    diff = z - zplus
    inv = cfg.vicreg_lambda * float(np.sum(diff**2)) / m
    g_inv = 2.0 * cfg.vicreg_lambda * diff / m

    cov = zt.T @ zt / (m - 1)
    std = np.sqrt(np.diag(cov) + cfg.vicreg_eps)
    hinge = np.maximum(0.0, 1.0 - std)
    pen_var = cfg.mu / d * float(hinge.sum())
    offmask = 1.0 - np.eye(d)
    pen_cov = (cfg.nu / (d * (d - 1)) * float(np.sum((cov * offmask) ** 2))) if d > 1 else 0.0

    g_cov = (2.0 * cfg.nu / (d * (d - 1)) if d > 1 else 0.0) * (cov * offmask)
    g_cov[np.diag_indices(d)] = np.where(hinge > 0.0, -cfg.mu / d / (2.0 * std), 0.0)
    g_zt = zt @ (g_cov + g_cov.T) / (m - 1)
    g_zt -= g_zt.mean(axis=0)  # chain through batch centering
    return LossOutput(
        value=inv + pen_var + pen_cov, grad_z=g_inv + g_zt, grad_zplus=-g_inv
    )


def loss_rq_direct(z, zplus, cfg: PenaltyConfig, split: SplitScheme) -> LossOutput:
    """Trace objective with kernel-weighted orthogonality penalties.

    -(sum_i) E^[psi_i(a) psi_i(a+)]
    + (mu/d) sum_i (C1_ii - 1)(C2_ii - 1)                    [marginal norms]
    + (nu/(d(d-1))) sum_{i != j} T1_ij T2_ij                 [pair moments]

    with T_h the symmetrized per-half estimate of E[psi_i(a) psi_j(a+)].
    Unlike the plain Rayleigh-quotient loss, the off-diagonal constraint is
    weighted by the operator, which pins the minimizer to a signed
    permutation of eigenfunctions rather than a rotation.
    """
    z, zplus = _check_pair(z, zplus, 4)
    m, d = z.shape
    half1, half2 = split.halves(m)

    trace = -float(np.sum(z * zplus)) / m
    gz = -zplus / m
    gp = -z / m

    c1 = _marginal_moments(z, zplus, half1)
    c2 = _marginal_moments(z, zplus, half2)
    var1, var2 = np.diag(c1) - 1.0, np.diag(c2) - 1.0
    pen_var = cfg.mu / d * float(var1 @ var2)

    def pair_moment(idx):
        t = z[idx].T @ zplus[idx] / idx.size
        return 0.5 * (t + t.T)

    offmask = 1.0 - np.eye(d)
    if d > 1:
        t1, t2 = pair_moment(half1), pair_moment(half2)
        pen_cross = cfg.nu / (d * (d - 1)) * float(np.sum(t1 * t2 * offmask))
    else:
        pen_cross = 0.0

    for idx, c_other in ((half1, c2), (half2, c1)):
        diag_w = cfg.mu / d * (np.diag(c_other) - 1.0)
        gz[idx] += (2.0 / m) * z[idx] * diag_w
        gp[idx] += (2.0 / m) * zplus[idx] * diag_w
    if d > 1:
        for idx, t_other in ((half1, t2), (half2, t1)):
            w = cfg.nu / (d * (d - 1)) * (t_other * offmask)
            gz[idx] += zplus[idx] @ w / idx.size
            gp[idx] += z[idx] @ w / idx.size
    return LossOutput(value=trace + pen_var + pen_cross, grad_z=gz, grad_zplus=gp)


OBJECTIVES = ("scl", "lora_svd", "rq", "vicreg", "rq_direct")
