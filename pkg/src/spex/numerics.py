"""Dense float64 linear algebra, orthogonal polynomials, and seedable RNG.

Everything downstream runs on plain numpy float64 arrays. This module owns
the symmetric eigensolver, the Legendre recurrence, and the counter-based
random-state value used to derive reproducible, non-overlapping substreams.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ContractViolation",
    "NumericalError",
    "RngState",
    "SpectralResult",
    "sym_eig",
    "legendre_eval",
]

MAX_EIG_DIM = 4096


class ContractViolation(ValueError):
    """An input violated a documented precondition."""


class NumericalError(RuntimeError):
    """A numerical routine failed; the message carries diagnostics."""


# ---------------------------------------------------------------------------
# symmetric eigendecomposition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectralResult:
    """Eigenvalues (descending) and orthonormal eigenvector columns."""

    eigenvalues: np.ndarray  # (n,), non-increasing
    eigenvectors: np.ndarray  # (n, n), column i pairs with eigenvalues[i]

    def residual(self, b: np.ndarray) -> float:
        """Frobenius norm of B V - V diag(w), for contract checks."""
        return float(
            np.linalg.norm(b @ self.eigenvectors - self.eigenvectors * self.eigenvalues)
        )


def _canonical_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its first entry of non-negligible magnitude is positive.

    Makes the decomposition deterministic and gives signed-permutation output
    on diagonal input. Ties between numerically equal eigenvalues keep the
    solver's order; only distinct spectra are contractual.
    """
    n = vectors.shape[0]
    out = vectors.copy()
    for j in range(vectors.shape[1]):
        col = out[:, j]
        idx = np.argmax(np.abs(col) > 1e-12)
        if col[idx] < 0:
            out[:, j] = -col
    assert out.shape[0] == n
    return out


def sym_eig(b: np.ndarray) -> SpectralResult:
    """Eigendecompose a symmetric matrix, eigenvalues sorted descending.

    Backed by LAPACK's symmetric solver; the inputs this repo produces are
    at most ``MAX_EIG_DIM`` square. Raises ContractViolation for non-square
    or asymmetric input, NumericalError if the solver fails to converge.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise ContractViolation(f"sym_eig requires a square matrix, got shape {b.shape}")
    if b.shape[0] > MAX_EIG_DIM:
        raise ContractViolation(f"sym_eig dimension {b.shape[0]} exceeds {MAX_EIG_DIM}")
    if not np.all(np.isfinite(b)):
        raise ContractViolation("sym_eig input contains non-finite entries")
    scale = max(1.0, float(np.max(np.abs(b))))
    asym = float(np.max(np.abs(b - b.T)))
    if asym > 1e-12 * scale:
        raise ContractViolation(
            f"sym_eig input asymmetric: max|B - B^T| = {asym:.3e} (scale {scale:.3e})"
        )
    try:
        w, v = np.linalg.eigh(b)
    except np.linalg.LinAlgError as exc:
        off = float(np.linalg.norm(b - np.diag(np.diag(b))))
        raise NumericalError(
            f"symmetric eigensolver did not converge; off-diagonal norm {off:.3e}"
        ) from exc
    order = np.argsort(-w, kind="stable")
    return SpectralResult(
        eigenvalues=w[order], eigenvectors=_canonical_signs(v[:, order])
    )


# ---------------------------------------------------------------------------
# Legendre polynomials
# ---------------------------------------------------------------------------


def legendre_eval(n: int, x) -> np.ndarray | float:
    """P_n(x) on [-1, 1] via the Bonnet three-term recurrence.

    (k+1) P_{k+1}(x) = (2k+1) x P_k(x) - k P_{k-1}(x); exact at n in {0, 1}.
    Accepts scalars or arrays and returns the matching shape.
    """
    if n < 0:
        raise ContractViolation(f"legendre_eval degree must be >= 0, got {n}")
    arr = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(arr) > 1.0 + 1e-12):
        raise ContractViolation("legendre_eval argument outside [-1, 1]")
    p_prev = np.ones_like(arr)
    if n == 0:
        return p_prev if arr.ndim else float(p_prev)
    p_cur = arr.copy()
    for k in range(1, n):
        p_next = ((2 * k + 1) * arr * p_cur - k * p_prev) / (k + 1)
        p_prev, p_cur = p_cur, p_next
    return p_cur if arr.ndim else float(p_cur)


# ---------------------------------------------------------------------------
# counter-based randomness
# ---------------------------------------------------------------------------


def _mix(counter: int, tag) -> int:
    """Stable 64-bit mix of a counter and a domain tag (string/int/tuple)."""
    h = hashlib.sha256()
    h.update(counter.to_bytes(8, "little", signed=False))
    h.update(repr(tag).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


@dataclass(frozen=True)
class RngState:
    """Value-type random state: (seed, counter) keys a Philox stream.

    Distinct (seed, counter) pairs give independent, non-overlapping streams,
    so substreams may be consumed in parallel and merged deterministically.
    Callers split explicitly with :meth:`substream`; nothing is shared.
    """

    seed: int
    counter: int = 0

    def substream(self, tag) -> "RngState":
        """Derive an independent state, domain-separated by ``tag``."""
        return RngState(seed=self.seed, counter=_mix(self.counter, tag))

    def generator(self) -> np.random.Generator:
        """Fresh numpy Generator positioned at the start of this stream."""
        key = (self.seed & 0xFFFFFFFFFFFFFFFF) | (
            (self.counter & 0xFFFFFFFFFFFFFFFF) << 64
        )
        return np.random.Generator(np.random.Philox(key=key))
