"""Lifting eigenspace objectives to ordered eigenfunction extraction.

Joint nesting sums the base loss over a ladder of leading-column prefixes
with positive weights; the global minimizer is then the ordered
eigenfunctions up to per-index scale, for any positive weights. Sequential
nesting sums per-index losses in which all earlier columns are treated as
constants (stop-gradient), so head i receives gradient only from its own
term; with disjoint final-layer heads this reproduces the solve-one-at-a-time
scheme inside a single optimization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractViolation
from .objectives import (
    LossOutput,
    PenaltyConfig,
    SplitScheme,
    loss_lora_svd,
    loss_rq,
    loss_rq_direct,
    loss_scl,
    loss_vicreg,
)

__all__ = ["NestingPlan", "joint_nested_loss", "sequential_nested_loss", "prefix_loss"]


@dataclass(frozen=True)
class NestingPlan:
    """Strictly increasing prefix widths (last = d) with positive weights."""

    dims: tuple[int, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if not self.dims:
            raise ContractViolation("nesting plan needs at least one prefix")
        if any(b <= a for a, b in zip(self.dims, self.dims[1:])):
            raise ContractViolation("nesting dims must be strictly increasing")
        if self.dims[0] < 1:
            raise ContractViolation("nesting dims must be >= 1")
        if len(self.weights) != len(self.dims) or any(w <= 0 for w in self.weights):
            raise ContractViolation("need one positive weight per prefix")

    @classmethod
    def full(cls, d: int) -> "NestingPlan":
        """Every prefix 1..d, averaged (uniform weights 1/d)."""
        return cls(dims=tuple(range(1, d + 1)), weights=(1.0 / d,) * d)

    def validate_width(self, d: int) -> None:
        if self.dims[-1] != d:
            raise ContractViolation(
                f"nesting plan ends at {self.dims[-1]}, output width is {d}"
            )


def prefix_loss(
    base: str,
    z: np.ndarray,
    zplus: np.ndarray,
    cfg: PenaltyConfig,
    split: SplitScheme | None,
    normalize: bool,
) -> LossOutput:
    """Dispatch one base loss by name on full-width outputs."""
    if base == "scl":
        return loss_scl(z, zplus, normalize=normalize)
    if base == "lora_svd":
        return loss_lora_svd(z, zplus)
    if base == "rq":
        return loss_rq(z, zplus, cfg, split if split is not None else SplitScheme())
    if base == "vicreg":
        return loss_vicreg(z, zplus, cfg)
    if base == "rq_direct":
        return loss_rq_direct(z, zplus, cfg, split if split is not None else SplitScheme())
    raise ContractViolation(f"unknown objective {base!r}")


def joint_nested_loss(
    base: str,
    z: np.ndarray,
    zplus: np.ndarray,
    plan: NestingPlan,
    cfg: PenaltyConfig,
    split: SplitScheme | None = None,
    normalize: bool = False,
) -> LossOutput:
    """Weighted sum of the base loss over leading-column prefixes.

    Each prefix loss sees only the first k columns (normalization, when on,
    is applied per prefix independently); its gradient is zero-padded back to
    full width and accumulated.
    """
    d = z.shape[1]
    plan.validate_width(d)
    value = 0.0
    gz = np.zeros_like(np.asarray(z, dtype=np.float64))
    gp = np.zeros_like(gz)
    for k, w in zip(plan.dims, plan.weights):
        out = prefix_loss(base, z[:, :k], zplus[:, :k], cfg, split, normalize)
        value += w * out.value
        gz[:, :k] += w * out.grad_z
        gp[:, :k] += w * out.grad_zplus
    return LossOutput(value=value, grad_z=gz, grad_zplus=gp)


def sequential_nested_loss(
    base: str,
    z: np.ndarray,
    zplus: np.ndarray,
    cfg: PenaltyConfig,
    split: SplitScheme | None = None,
    normalize: bool = False,
) -> LossOutput:
    """Sum of per-prefix losses with all earlier columns stop-gradient.

    Term i is the base loss on columns 1..i; inside it, columns 1..i-1 are
    constants, so its entire output-gradient lands in column i. Summing the
    column-masked gradients is exactly the backward pass of
    sum_i L_i(sg(psi_1), ..., sg(psi_{i-1}), psi_i).
    """
    d = z.shape[1]
    value = 0.0
    gz = np.zeros_like(np.asarray(z, dtype=np.float64))
    gp = np.zeros_like(gz)
    for i in range(1, d + 1):
        out = prefix_loss(base, z[:, :i], zplus[:, :i], cfg, split, normalize)
        value += out.value
        gz[:, i - 1] += out.grad_z[:, i - 1]
        gp[:, i - 1] += out.grad_zplus[:, i - 1]
    return LossOutput(value=value, grad_z=gz, grad_zplus=gp)
