"""Streaming second-moment accumulation and post-hoc rotation to eigenfunctions.

Three modes, one per training objective family:

* ``rq``     — B accumulates the pair cross-moment E[psi(a) psi(a+)^T]; the
  encoder is already an orthonormal basis of the top eigenspace, so the
  eigenvectors of B rotate it into ordered eigenfunctions.
* ``vicreg`` — same cross-moment, but of mean-centered outputs; the mean over
  both views is estimated in the same single pass and carried into inference.
* ``scl``    — B accumulates the marginal second moment E[psi psi^T] over both
  views; the basis is sqrt(eigenvalue)-scaled rather than orthonormal, so the
  rotation is followed by a per-column 1/sqrt(eigenvalue) rescale.

All accumulators are running means of raw products (plus raw view means for
vicreg), so any chunking of the same sample stream yields the same state up
to floating-point reassociation, and parallel states merge exactly by count
weighting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractViolation, sym_eig

__all__ = [
    "StreamState",
    "RRTransform",
    "InsufficientDataError",
    "RankDeficiencyError",
    "new_stream",
    "stream_update",
    "merge",
    "moment_matrix",
    "finalize",
    "apply",
    "MODES",
]

MODES = ("rq", "vicreg", "scl")


class InsufficientDataError(RuntimeError):
    """Fewer samples accumulated than output dimensions."""


class RankDeficiencyError(RuntimeError):
    """A non-positive eigenvalue where a positive spectrum is required."""


@dataclass(frozen=True)
class StreamState:
    """Running moments for one extraction mode.

    ``cnt`` counts accumulated samples: pairs for rq/vicreg, single views
    (2 per pair) for scl. ``mean_z``/``mean_plus`` are per-view running means,
    kept only in vicreg mode.
    """

    mode: str
    d: int
    b: np.ndarray  # (d, d) running mean of products
    cnt: int
    mean_z: np.ndarray | None = None
    mean_plus: np.ndarray | None = None

    @property
    def mean(self) -> np.ndarray | None:
        """Pooled two-view mean (vicreg mode only)."""
        if self.mean_z is None:
            return None
        return 0.5 * (self.mean_z + self.mean_plus)


@dataclass(frozen=True)
class RRTransform:
    """Finalized rotation applied to encoder outputs at inference."""

    mode: str
    u: np.ndarray  # (d, d), orthonormal columns
    eigenvalues: np.ndarray  # (d,), descending
    mean: np.ndarray | None = None  # vicreg
    scale: np.ndarray | None = None  # scl: eigenvalue^{-1/2} per column


def new_stream(mode: str, d: int) -> StreamState:
    if mode not in MODES:
        raise ContractViolation(f"unknown stream mode {mode!r}")
    if d < 1:
        raise ContractViolation("stream dimension must be >= 1")
    means = (np.zeros(d), np.zeros(d)) if mode == "vicreg" else (None, None)
    return StreamState(mode=mode, d=d, b=np.zeros((d, d)), cnt=0, mean_z=means[0], mean_plus=means[1])


def _check_batch(state: StreamState, z: np.ndarray, zplus: np.ndarray):
    z = np.asarray(z, dtype=np.float64)
    zplus = np.asarray(zplus, dtype=np.float64)
    if z.ndim != 2 or z.shape != zplus.shape or z.shape[1] != state.d:
        raise ContractViolation(
            f"batch shapes {z.shape}/{zplus.shape} do not match stream dimension {state.d}"
        )
    return z, zplus


def stream_update(state: StreamState, z: np.ndarray, zplus: np.ndarray) -> StreamState:
    """Fold one batch of paired outputs into the running moments."""
    z, zplus = _check_batch(state, z, zplus)
    m = z.shape[0]
    if state.mode == "rq":
        b = (state.cnt * state.b + z.T @ zplus) / (state.cnt + m)
        return StreamState(mode="rq", d=state.d, b=b, cnt=state.cnt + m)
    if state.mode == "scl":
        b = (state.cnt * state.b + z.T @ z + zplus.T @ zplus) / (state.cnt + 2 * m)
        return StreamState(mode="scl", d=state.d, b=b, cnt=state.cnt + 2 * m)
    cnt = state.cnt + m
    b = (state.cnt * state.b + z.T @ zplus) / cnt
    mean_z = (state.cnt * state.mean_z + z.sum(axis=0)) / cnt
    mean_plus = (state.cnt * state.mean_plus + zplus.sum(axis=0)) / cnt
    return StreamState(mode="vicreg", d=state.d, b=b, cnt=cnt, mean_z=mean_z, mean_plus=mean_plus)


def merge(s1: StreamState, s2: StreamState) -> StreamState:
    """Exact count-weighted merge of two states of the same mode."""
    if s1.mode != s2.mode or s1.d != s2.d:
        raise ContractViolation("cannot merge streams of different mode or width")
    cnt = s1.cnt + s2.cnt
    if cnt == 0:
        return s1
    b = (s1.cnt * s1.b + s2.cnt * s2.b) / cnt
    if s1.mode != "vicreg":
        return StreamState(mode=s1.mode, d=s1.d, b=b, cnt=cnt)
    mean_z = (s1.cnt * s1.mean_z + s2.cnt * s2.mean_z) / cnt
    mean_plus = (s1.cnt * s1.mean_plus + s2.cnt * s2.mean_plus) / cnt
    return StreamState(mode="vicreg", d=s1.d, b=b, cnt=cnt, mean_z=mean_z, mean_plus=mean_plus)


def moment_matrix(state: StreamState) -> np.ndarray:
    """The accumulated (pre-symmetrization) moment the eigensolve will see.

    rq/scl: the running mean itself. vicreg: the pooled-mean-centered cross
    moment E^[(z - mu)(z+ - mu)^T], assembled from the raw running moments.
    """
    if state.mode != "vicreg":
        return state.b.copy()
    mu = state.mean
    return (
        state.b
        - np.outer(state.mean_z, mu)
        - np.outer(mu, state.mean_plus)
        + np.outer(mu, mu)
    )


def finalize(state: StreamState) -> RRTransform:
    """Symmetrize, eigendecompose, and package the inference-time rotation.

    The Monte-Carlo accumulator is asymmetric; its population limit is
    symmetric, so (B + B^T)/2 is taken before the eigensolve. scl mode
    requires a strictly positive spectrum (the column rescale divides by
    sqrt(eigenvalue)) and fails loudly on rank deficiency instead of
    clamping: a non-positive estimate means the encoder did not learn d
    independent directions.
    """
    if state.cnt < state.d:
        raise InsufficientDataError(
            f"need at least {state.d} samples to finalize, have {state.cnt}"
        )
    b = moment_matrix(state)
    res = sym_eig(0.5 * (b + b.T))
    scale = None
    if state.mode == "scl":
        bad = np.flatnonzero(res.eigenvalues <= 0.0)
        if bad.size:
            raise RankDeficiencyError(
                f"non-positive eigenvalue at index {int(bad[0]) + 1}: "
                f"{res.eigenvalues[bad[0]]:.3e}"
            )
        scale = 1.0 / np.sqrt(res.eigenvalues)
    return RRTransform(
        mode=state.mode,
        u=res.eigenvectors,
        eigenvalues=res.eigenvalues,
        mean=state.mean.copy() if state.mode == "vicreg" else None,
        scale=scale,
    )


def apply(t: RRTransform, z: np.ndarray) -> np.ndarray:
    """Rotate encoder outputs into ordered eigenfunction estimates.

    Accepts a single d-vector or an (m, d) batch; column j of the result
    estimates the j-th eigenfunction.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    rows = np.atleast_2d(z)
    if t.mode == "vicreg":
        rows = rows - t.mean
    out = rows @ t.u
    if t.mode == "scl":
        out = out * t.scale
    return out[0] if single else out
