"""Feedforward encoder with feature augmentation and exact reverse-mode gradients.

The encoder is an MLP with GeLU hidden layers (tanh approximation, so the
derivative is closed-form) over an augmented input: raw coordinates,
a full monomial basis, or per-axis cosine features. The forward pass records
a tape; the backward pass replays it exactly, honoring stop-gradient marks on
output columns so that a summed sequential loss routes gradients to one head
at a time. The final linear layer gives each output column its own weight
column and bias, so any partition of output indices has disjoint final-layer
parameters; ``head_partition`` records and validates the intended grouping.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .numerics import ContractViolation, NumericalError, RngState

__all__ = [
    "FeatureMap",
    "Network",
    "EncoderPair",
    "Tape",
    "AdamState",
    "forward",
    "backward",
    "adam_step",
    "gelu",
    "gelu_grad",
]

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def _gelu_inner_tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(_GELU_C * (x + _GELU_A * (x * x * x)))


def gelu(x: np.ndarray) -> np.ndarray:
    """0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    return 0.5 * x * (1.0 + _gelu_inner_tanh(x))


def _gelu_grad_cached(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    # t = tanh(...) saved from the forward pass
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * (x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * ((1.0 - t * t) * du)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return _gelu_grad_cached(x, _gelu_inner_tanh(x))


# ---------------------------------------------------------------------------
# feature augmentation
# ---------------------------------------------------------------------------

RAW = "raw"
POLYNOMIAL = "polynomial"
FOURIER_FEATURES = "fourier"


@dataclass(frozen=True)
class FeatureMap:
    """Deterministic input augmentation applied before the first layer.

    polynomial: every monomial a_1^{i_1} ... a_p^{i_p} with 0 <= i_j <= degree,
    in lexicographic exponent order; width (degree+1)^p.
    fourier: cos(i pi a_j) for 0 <= i <= degree and each axis j; width
    p * (degree + 1).
    """

    kind: str
    p: int
    degree: int = 0

    def __post_init__(self):
        if self.kind not in (RAW, POLYNOMIAL, FOURIER_FEATURES):
            raise ContractViolation(f"unknown feature map kind {self.kind!r}")
        if self.p < 1:
            raise ContractViolation("feature map requires p >= 1")
        if self.kind != RAW and self.degree < 0:
            raise ContractViolation("feature degree must be >= 0")

    @property
    def width(self) -> int:
        if self.kind == RAW:
            return self.p
        if self.kind == POLYNOMIAL:
            return (self.degree + 1) ** self.p
        return self.p * (self.degree + 1)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if pts.shape[1] != self.p:
            raise ContractViolation(f"points must have {self.p} coordinates")
        if np.any(np.abs(pts) > 1.0 + 1e-12):
            raise ContractViolation("points outside [-1, 1]^p")
        if self.kind == RAW:
            return pts
        if self.kind == POLYNOMIAL:
            # per-axis power tables, then products over exponent tuples
            powers = [
                np.stack([pts[:, j] ** e for e in range(self.degree + 1)], axis=1)
                for j in range(self.p)
            ]
            cols = []
            for exps in itertools.product(range(self.degree + 1), repeat=self.p):
                col = powers[0][:, exps[0]]
                for j in range(1, self.p):
                    col = col * powers[j][:, exps[j]]
                cols.append(col)
            return np.stack(cols, axis=1)
        freqs = np.arange(self.degree + 1) * np.pi
        # (m, p, degree+1) -> (m, p*(degree+1))
        feats = np.cos(pts[:, :, None] * freqs[None, None, :])
        return feats.reshape(pts.shape[0], -1)


# ---------------------------------------------------------------------------
# network, tape, backward
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Forward intermediates for one batch, plus stop-gradient column marks."""

    features: np.ndarray  # (m, width_in)
    pre_acts: list  # z_l per layer, (m, width_{l+1})
    hidden: list  # gelu(z_l) for hidden layers
    tanh_cache: list  # tanh term of each hidden gelu, reused by backward
    stop_columns: np.ndarray  # bool (d,), True = blocked at the output

    def mark_stop_gradient(self, columns) -> None:
        self.stop_columns[np.asarray(columns, dtype=int)] = True


class Network:
    """MLP encoder: feature map -> hidden GeLU layers -> linear output.

    Parameters live in ``weights``/``biases`` (layer order); ``output_offset``
    is a non-trainable vector subtracted from the output, used to bake in an
    estimated output mean after training. With ``head_partition`` set, output
    index groups are validated to be disjoint; the final dense layer already
    gives each output column exclusive parameters.
    """

    def __init__(
        self,
        feature_map: FeatureMap,
        hidden: list[int],
        d: int,
        rng: RngState,
        head_partition: list[list[int]] | None = None,
    ):
        if d < 1:
            raise ContractViolation("output width d must be >= 1")
        self.feature_map = feature_map
        self.widths = [feature_map.width, *hidden, d]
        gen = rng.substream("init").generator()
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            limit = np.sqrt(6.0 / fan_in)
            self.weights.append(gen.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.output_offset = np.zeros(d)
        self.head_partition = None
        if head_partition is not None:
            flat = [i for group in head_partition for i in group]
            if len(set(flat)) != len(flat) or any(not 0 <= i < d for i in flat):
                raise ContractViolation("head_partition groups must be disjoint indices in [0, d)")
            self.head_partition = [list(g) for g in head_partition]

    @property
    def d(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, points: np.ndarray) -> tuple[np.ndarray, Tape]:
        feats = self.feature_map(points)
        pre_acts, hidden, tanh_cache = [], [], []
        h = feats
        for l in range(self.n_layers):
            z = h @ self.weights[l] + self.biases[l]
            pre_acts.append(z)
            if l < self.n_layers - 1:
                t = _gelu_inner_tanh(z)
                tanh_cache.append(t)
                h = 0.5 * z * (1.0 + t)
                hidden.append(h)
        out = pre_acts[-1] - self.output_offset
        tape = Tape(
            features=feats,
            pre_acts=pre_acts,
            hidden=hidden,
            tanh_cache=tanh_cache,
            stop_columns=np.zeros(self.d, dtype=bool),
        )
        return out, tape

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.forward(points)[0]

    def backward(self, tape: Tape, grad_outputs: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        if grad_outputs.shape != tape.pre_acts[-1].shape:
            raise ContractViolation(
                f"gradient shape {grad_outputs.shape} does not match batch outputs "
                f"{tape.pre_acts[-1].shape}"
            )
        dz = np.where(tape.stop_columns, 0.0, grad_outputs)
        grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * self.n_layers
        for l in range(self.n_layers - 1, -1, -1):
            h_in = tape.features if l == 0 else tape.hidden[l - 1]
            grads[l] = (h_in.T @ dz, dz.sum(axis=0))
            if l > 0:
                dz = (dz @ self.weights[l].T) * _gelu_grad_cached(
                    tape.pre_acts[l - 1], tape.tanh_cache[l - 1]
                )
        return grads  # type: ignore[return-value]

    # -- parameter plumbing --------------------------------------------------

    def parameter_arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        out.append(self.output_offset)
        return out

    def set_parameter_arrays(self, arrays: list[np.ndarray]) -> None:
        expected = 2 * self.n_layers + 1
        if len(arrays) != expected:
            raise ContractViolation(f"expected {expected} parameter arrays, got {len(arrays)}")
        for l in range(self.n_layers):
            w, b = arrays[2 * l], arrays[2 * l + 1]
            if w.shape != self.weights[l].shape or b.shape != self.biases[l].shape:
                raise ContractViolation(f"parameter shape mismatch at layer {l}")
            self.weights[l] = w.copy()
            self.biases[l] = b.copy()
        self.output_offset = arrays[-1].copy()

    def copy(self) -> "Network":
        clone = Network.__new__(Network)
        clone.feature_map = self.feature_map
        clone.widths = list(self.widths)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        clone.output_offset = self.output_offset.copy()
        clone.head_partition = (
            None if self.head_partition is None else [list(g) for g in self.head_partition]
        )
        return clone


@dataclass
class EncoderPair:
    """Two encoders with separate parameters, for the two-sided SVD objective."""

    phi: Network
    psi: Network


def forward(net: Network, fmap: FeatureMap, points: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Functional forward: fmap overrides the map bundled with the network."""
    if fmap.width != net.widths[0]:
        raise ContractViolation(
            f"feature width {fmap.width} does not match network input {net.widths[0]}"
        )
    saved = net.feature_map
    net.feature_map = fmap
    try:
        return net.forward(points)
    finally:
        net.feature_map = saved


def backward(
    net: Network, tape: Tape, grad_outputs: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Functional backward: exact reverse-mode gradients for one tape."""
    return net.backward(tape, grad_outputs)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam, one moment pair per parameter array."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_network(cls, net: Network, lr: float = 1e-3) -> "AdamState":
        shapes = []
        for w, b in zip(net.weights, net.biases):
            shapes.extend([w.shape, b.shape])
        return cls(
            lr=lr,
            m=[np.zeros(s) for s in shapes],
            v=[np.zeros(s) for s in shapes],
        )


def adam_step(
    net: Network, grads: list[tuple[np.ndarray, np.ndarray]], state: AdamState
) -> tuple[Network, AdamState]:
    """One in-place Adam update; returns (net, state) for call-site chaining."""
    flat: list[np.ndarray] = []
    for l, (dw, db) in enumerate(grads):
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise NumericalError(f"non-finite gradient at layer {l}")
        flat.extend([dw, db])
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    params: list[np.ndarray] = []
    for w, b in zip(net.weights, net.biases):
        params.extend([w, b])
    for p, g, m, v in zip(params, flat, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state
