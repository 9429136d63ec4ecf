"""End-to-end optimization loop: sampler -> encoder -> (nested) objective -> Adam.

Each step draws a fresh paired batch (or fetches one from a pre-drawn pool),
evaluates the configured objective, and applies one bias-corrected Adam
update. Batches, initialization, and sample splits all come from
domain-separated substreams of one seed, so a run is bit-reproducible and a
checkpointed run continues exactly where it left off.

Batch outputs are centered (pooled over both views) before the objective by
default, which points every objective at the nontrivial spectrum: the
kernel's top eigenfunction is the constant, and uncentered losses would spend
one output dimension learning it. After training, the residual output mean is
estimated on fresh samples and baked into the encoder as a fixed offset, so
downstream extraction sees mean-zero features.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import KernelSpec, SampleBatch, sample_pairs
from .nesting import NestingPlan, joint_nested_loss, prefix_loss, sequential_nested_loss
from .nn import AdamState, EncoderPair, FeatureMap, Network, adam_step
from .numerics import ContractViolation, RngState
from .objectives import OBJECTIVES, PenaltyConfig, SplitScheme

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "train",
    "sequential_train",
    "pretrain_pool",
    "load_pool",
    "build_network",
    "save_train_state",
    "load_train_state",
]

SPLIT_OBJECTIVES = ("rq", "rq_direct")
CENTER_SAMPLES = 65_536


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the last good parameters."""

    def __init__(self, step: int, last_good):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run depends on."""

    objective: str
    d: int
    steps: int
    batch: int
    lr: float = 1e-3
    seed: int = 0
    nesting: str = "none"  # none | joint | sequential
    plan: NestingPlan | None = None
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    scl_normalize: bool = False
    center: bool = True
    trace_every: int = 200
    pool: str | None = None  # path of a pre-drawn pair pool; None = on the fly

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ContractViolation(f"unknown objective {self.objective!r}")
        if self.nesting not in ("none", "joint", "sequential"):
            raise ContractViolation(f"unknown nesting mode {self.nesting!r}")
        if self.steps < 1:
            raise ContractViolation("steps must be >= 1")
        min_m = 4 if self.objective in SPLIT_OBJECTIVES else 2
        if self.batch < min_m:
            raise ContractViolation(f"batch must be >= {min_m} for {self.objective}")
        if self.objective in SPLIT_OBJECTIVES and self.batch % 2:
            raise ContractViolation("split objectives need an even batch size")
        if self.objective == "lora_svd" and self.nesting == "sequential":
            raise ContractViolation("sequential nesting supports single-encoder objectives only")


@dataclass
class TrainResult:
    net: Network | EncoderPair
    trace: list  # (step, loss) at trace cadence, plus the final step
    final_loss: float
    adam_states: list | None = None


def build_network(
    spec: KernelSpec,
    d: int,
    hidden_layers: int,
    width: int,
    rng: RngState,
    feature_kind: str | None = None,
    feature_degree: int | None = None,
    head_partition: bool = False,
) -> Network:
    """Encoder matching the training protocol for this kernel family.

    Feature augmentation defaults to the kernel's own family at degree r:
    monomials for Legendre kernels, per-axis cosines for Fourier kernels.
    """
    if feature_kind is None:
        feature_kind = "polynomial" if spec.kind == "legendre" else "fourier"
    if feature_degree is None:
        feature_degree = spec.r
    fmap = FeatureMap(kind=feature_kind, p=spec.p, degree=feature_degree)
    partition = [[i] for i in range(d)] if head_partition else None
    return Network(
        feature_map=fmap,
        hidden=[width] * hidden_layers,
        d=d,
        rng=rng,
        head_partition=partition,
    )


# ---------------------------------------------------------------------------
# pair pools
# ---------------------------------------------------------------------------


def pretrain_pool(spec: KernelSpec, rng: RngState, n: int, path: str) -> str:
    """Draw and persist n pairs for pool-backed training; returns the path."""
    if n < 1:
        raise ContractViolation("pool size must be >= 1")
    batch = sample_pairs(spec, rng.substream("pool"), n)
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, a=batch.a, aplus=batch.aplus)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed to write pair pool at {path}: {exc}") from exc
    return path


def load_pool(path: str) -> SampleBatch:
    try:
        with np.load(path) as data:
            return SampleBatch(a=data["a"].copy(), aplus=data["aplus"].copy())
    except OSError as exc:
        raise OSError(f"failed to read pair pool at {path}: {exc}") from exc


class _BatchSource:
    """Step-indexed batches: fresh rejection samples, or pool epochs shuffled
    without replacement."""

    def __init__(self, spec: KernelSpec, cfg: TrainConfig, rng: RngState):
        self.spec = spec
        self.cfg = cfg
        self.rng = rng
        self.pool = load_pool(cfg.pool) if cfg.pool else None
        if self.pool is not None and self.pool.m < cfg.batch:
            raise ContractViolation("pool smaller than one batch")
        self._epoch = -1
        self._order = None

    def batch(self, step: int) -> SampleBatch:
        if self.pool is None:
            return sample_pairs(self.spec, self.rng.substream(("batch", step)), self.cfg.batch)
        per_epoch = self.pool.m // self.cfg.batch
        epoch, slot = divmod(step, per_epoch)
        if epoch != self._epoch:
            gen = self.rng.substream(("epoch", epoch)).generator()
            self._order = gen.permutation(self.pool.m)
            self._epoch = epoch
        idx = self._order[slot * self.cfg.batch : (slot + 1) * self.cfg.batch]
        return SampleBatch(a=self.pool.a[idx], aplus=self.pool.aplus[idx])


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def _center(z: np.ndarray, zplus: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = 0.5 * (z.mean(axis=0) + zplus.mean(axis=0))
    return z - mu, zplus - mu


def _batch_loss(cfg: TrainConfig, z, zplus, split):
    if cfg.nesting == "joint":
        plan = cfg.plan if cfg.plan is not None else NestingPlan.full(cfg.d)
        return joint_nested_loss(
            cfg.objective, z, zplus, plan, cfg.penalty, split, cfg.scl_normalize
        )
    if cfg.nesting == "sequential":
        return sequential_nested_loss(
            cfg.objective, z, zplus, cfg.penalty, split, cfg.scl_normalize
        )
    return prefix_loss(cfg.objective, z, zplus, cfg.penalty, split, cfg.scl_normalize)


def _bake_output_offset(net: Network, spec: KernelSpec, rng: RngState) -> None:
    """Estimate the marginal output mean and store it as a fixed offset."""
    pts = rng.substream("center").generator().uniform(-1.0, 1.0, size=(CENTER_SAMPLES, spec.p))
    net.output_offset = net.output_offset + net(pts).mean(axis=0)


def train(
    spec: KernelSpec,
    net: Network | EncoderPair,
    cfg: TrainConfig,
    *,
    start_step: int = 0,
    adam_states: list | None = None,
    bake_offset: bool | None = None,
) -> TrainResult:
    """Run the configured objective for cfg.steps Adam updates.

    Deterministic for a fixed config: batches are keyed by step number, the
    per-step sample split by a step-derived seed, so a run saved at step k
    and resumed with ``start_step=k`` (and its Adam states) continues the
    uninterrupted trajectory bit for bit. Divergence (non-finite loss) aborts
    with the step index and the most recent traced parameters.

    ``bake_offset`` controls the post-training mean calibration; default is
    cfg.center. Pass False when saving an intermediate state for resumption.
    """
    pair_mode = cfg.objective == "lora_svd"
    if pair_mode != isinstance(net, EncoderPair):
        raise ContractViolation("lora_svd trains an EncoderPair; other objectives a Network")
    nets = [net.phi, net.psi] if pair_mode else [net]
    for one in nets:
        if one.d != cfg.d:
            raise ContractViolation(f"network output width {one.d} != configured d {cfg.d}")
    root = RngState(cfg.seed)
    source = _BatchSource(spec, cfg, root.substream("sampler"))
    states = (
        adam_states
        if adam_states is not None
        else [AdamState.for_network(one, lr=cfg.lr) for one in nets]
    )

    trace: list[tuple[int, float]] = []
    snapshot = [one.copy() for one in nets]
    loss_val = float("nan")
    for step in range(start_step, cfg.steps):
        batch = source.batch(step)
        split = (
            SplitScheme(seed=root.substream(("split", step)).counter)
            if cfg.objective in SPLIT_OBJECTIVES
            else None
        )
        if pair_mode:
            z, tape_z = nets[0].forward(batch.a)
            zp, tape_p = nets[1].forward(batch.aplus)
            if cfg.center:
                z = z - z.mean(axis=0)
                zp = zp - zp.mean(axis=0)
            out = _batch_loss(cfg, z, zp, split)
            gz, gp = out.grad_z, out.grad_zplus
            if cfg.center:
                gz = gz - gz.mean(axis=0)
                gp = gp - gp.mean(axis=0)
            grads = [nets[0].backward(tape_z, gz), nets[1].backward(tape_p, gp)]
        else:
            m = batch.m
            stacked, tape = nets[0].forward(np.vstack([batch.a, batch.aplus]))
            z, zp = stacked[:m], stacked[m:]
            if cfg.center:
                z, zp = _center(z, zp)
            out = _batch_loss(cfg, z, zp, split)
            gz, gp = out.grad_z, out.grad_zplus
            if cfg.center:
                # chain through the shared pooled mean
                mu_g = 0.5 * (gz.mean(axis=0) + gp.mean(axis=0))
                gz, gp = gz - mu_g, gp - mu_g
            grads = [nets[0].backward(tape, np.vstack([gz, gp]))]
        loss_val = out.value
        if not np.isfinite(loss_val):
            raise TrainingDiverged(step, snapshot)
        for one, g, st in zip(nets, grads, states):
            adam_step(one, g, st)
        if cfg.trace_every and step % cfg.trace_every == 0:
            trace.append((step, loss_val))
            snapshot = [one.copy() for one in nets]
    trace.append((cfg.steps - 1, loss_val))

    bake = cfg.center if bake_offset is None else bake_offset
    if bake:
        for one in nets:
            _bake_output_offset(one, spec, root)
    return TrainResult(net=net, trace=trace, final_loss=loss_val, adam_states=states)


def save_train_state(path: str, net: Network | EncoderPair, adam_states: list, step: int) -> None:
    """Persist mid-run state (parameters + Adam moments + step) for resumption."""
    nets = [net.phi, net.psi] if isinstance(net, EncoderPair) else [net]
    payload = {"step": np.array(step, dtype=np.int64)}
    for e, (one, st) in enumerate(zip(nets, adam_states)):
        for i, arr in enumerate(one.parameter_arrays()):
            payload[f"p{e}_{i}"] = arr
        for i, arr in enumerate(st.m):
            payload[f"m{e}_{i}"] = arr
        for i, arr in enumerate(st.v):
            payload[f"v{e}_{i}"] = arr
        payload[f"t{e}"] = np.array(st.step, dtype=np.int64)
        payload[f"lr{e}"] = np.array(st.lr)
    np.savez(path, **payload)


def load_train_state(path: str, net: Network | EncoderPair) -> tuple[list, int]:
    """Restore parameters into ``net`` and return (adam_states, step)."""
    nets = [net.phi, net.psi] if isinstance(net, EncoderPair) else [net]
    states = []
    with np.load(path) as data:
        step = int(data["step"])
        for e, one in enumerate(nets):
            n_arrays = 2 * one.n_layers + 1
            one.set_parameter_arrays([data[f"p{e}_{i}"] for i in range(n_arrays)])
            st = AdamState.for_network(one, lr=float(data[f"lr{e}"]))
            st.step = int(data[f"t{e}"])
            st.m = [data[f"m{e}_{i}"].copy() for i in range(len(st.m))]
            st.v = [data[f"v{e}_{i}"].copy() for i in range(len(st.v))]
            states.append(st)
    return states, step


def sequential_train(
    base: str,
    spec: KernelSpec,
    net: Network | list[Network],
    cfg: TrainConfig,
    strict_disjoint: bool = False,
) -> TrainResult:
    """Stop-gradient sequential nesting over d singleton heads.

    Default: one network with a singleton head partition; the summed loss
    routes each term's gradient to its own head while the shared trunk
    receives all of them. With ``strict_disjoint`` the parameters producing
    each function are fully separate: pass a list of d single-output
    networks, trained jointly under the same routed loss (term i updates
    network i alone, with earlier networks' outputs as constants).
    """
    if strict_disjoint:
        if not isinstance(net, list):
            raise ContractViolation("strict-disjoint mode takes a list of 1-output networks")
        return _sequential_train_strict(base, spec, net, cfg)
    if net.head_partition is None or any(len(g) != 1 for g in net.head_partition):
        raise ContractViolation("sequential nesting requires d singleton heads")
    run_cfg = replace(cfg, objective=base, nesting="sequential")
    return train(spec, net, run_cfg)


def _sequential_train_strict(
    base: str, spec: KernelSpec, nets: list[Network], cfg: TrainConfig
) -> TrainResult:
    d = len(nets)
    if d != cfg.d or any(one.d != 1 for one in nets):
        raise ContractViolation("strict-disjoint mode needs cfg.d single-output networks")
    run_cfg = replace(cfg, objective=base, nesting="sequential")
    root = RngState(run_cfg.seed)
    source = _BatchSource(spec, run_cfg, root.substream("sampler"))
    states = [AdamState.for_network(one, lr=run_cfg.lr) for one in nets]
    trace: list[tuple[int, float]] = []
    loss_val = float("nan")
    for step in range(run_cfg.steps):
        batch = source.batch(step)
        m = batch.m
        split = (
            SplitScheme(seed=root.substream(("split", step)).counter)
            if run_cfg.objective in SPLIT_OBJECTIVES
            else None
        )
        stacked = np.vstack([batch.a, batch.aplus])
        outs, tapes = zip(*(one.forward(stacked) for one in nets))
        full = np.hstack(outs)
        z, zp = full[:m], full[m:]
        if run_cfg.center:
            z, zp = _center(z, zp)
        out = sequential_nested_loss(
            run_cfg.objective, z, zp, run_cfg.penalty, split, run_cfg.scl_normalize
        )
        loss_val = out.value
        if not np.isfinite(loss_val):
            raise TrainingDiverged(step, [one.copy() for one in nets])
        gz, gp = out.grad_z, out.grad_zplus
        if run_cfg.center:
            mu_g = 0.5 * (gz.mean(axis=0) + gp.mean(axis=0))
            gz, gp = gz - mu_g, gp - mu_g
        for i, (one, tape, st) in enumerate(zip(nets, tapes, states)):
            gout = np.vstack([gz[:, i : i + 1], gp[:, i : i + 1]])
            adam_step(one, one.backward(tape, gout), st)
        if run_cfg.trace_every and step % run_cfg.trace_every == 0:
            trace.append((step, loss_val))
    trace.append((run_cfg.steps - 1, loss_val))
    if run_cfg.center:
        for one in nets:
            _bake_output_offset(one, spec, root)
    return TrainResult(net=nets, trace=trace, final_loss=loss_val, adam_states=states)
