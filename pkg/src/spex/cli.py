"""Experiment runner: train / rr / eval / oracle / sample / table1.

Every subcommand reads the flat key=value config (or the snapshot embedded in
a checkpoint), writes delimited output into a run directory, and renders the
matching matplotlib figure next to it. Exit codes: 0 success, 2 configuration
error, 3 training divergence, 4 rank-deficient rotation (scl mode).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import evaluation, rayleigh_ritz as rr, report
from .checkpoint import CheckpointError, load_checkpoint, network_from_config, save_checkpoint
from .config import (
    FAST_OVERRIDES,
    ConfigError,
    RunConfig,
    parse_config_file,
    serialize_config,
)
from .kernels import KernelSpec, basis_matrix, make_kernel, sample_pairs
from .nesting import NestingPlan
from .nn import EncoderPair
from .numerics import ContractViolation, RngState
from .objectives import PenaltyConfig
from .trainer import TrainConfig, TrainingDiverged, train

__all__ = ["main", "build_spec", "train_config_from_run", "evaluate_model", "aggregate"]

METRICS_HEADER = (
    "run_id,seed,kernel,p,r,d,objective,nesting,extractor,index,"
    "ef_mse,ev_rae,lambda_hat,lambda_true,steps,wall_ms"
)

_RR_MODE = {"scl": "scl", "rq": "rq", "rq_direct": "rq", "vicreg": "vicreg"}


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def build_spec(cfg: RunConfig) -> KernelSpec:
    return make_kernel(cfg.kernel_kind, cfg.kernel_p, cfg.kernel_r, cfg.kernel_decay)


def train_config_from_run(cfg: RunConfig) -> TrainConfig:
    plan = None
    if cfg.nesting_mode == "joint" and cfg.nesting_dims:
        weights = cfg.nesting_weights or tuple(
            1.0 / len(cfg.nesting_dims) for _ in cfg.nesting_dims
        )
        plan = NestingPlan(dims=cfg.nesting_dims, weights=weights)
    return TrainConfig(
        objective=cfg.train_objective,
        d=cfg.model_d,
        steps=cfg.train_steps,
        batch=cfg.train_batch,
        lr=cfg.train_lr,
        seed=cfg.seed,
        nesting=cfg.nesting_mode,
        plan=plan,
        penalty=PenaltyConfig(
            mu=cfg.penalty_mu,
            nu=cfg.penalty_nu,
            vicreg_lambda=cfg.vicreg_lambda,
            vicreg_eps=cfg.vicreg_eps,
        ),
        scl_normalize=cfg.scl_normalize,
        center=cfg.train_center,
        trace_every=cfg.train_trace_every,
        pool=cfg.train_pool or None,
    )


# ---------------------------------------------------------------------------
# evaluation plumbing shared by eval / table1
# ---------------------------------------------------------------------------


def _encoder_fn(net) -> callable:
    one = net.psi if isinstance(net, EncoderPair) else net
    return lambda pts: one(pts)


def _direct_predictor(cfg: RunConfig, spec: KernelSpec, net, rng: RngState):
    """Unit-normalized raw encoder outputs as eigenfunction estimates."""
    raw = _encoder_fn(net)
    pts = rng.substream("norm").generator().uniform(
        -1.0, 1.0, size=(min(cfg.eval_samples, 100_000), spec.p)
    )
    norms = np.sqrt(np.mean(raw(pts) ** 2, axis=0))
    if np.any(norms < 1e-10):
        raise evaluation.DegenerateFeatureError("encoder output collapsed to zero")
    return lambda points: raw(points) / norms


def _rr_predictor(net, transform):
    raw = _encoder_fn(net)
    return lambda points: rr.apply(transform, raw(points))


def evaluate_model(
    cfg: RunConfig,
    spec: KernelSpec,
    net,
    transform,
    extractor: str,
    seed: int | None = None,
) -> evaluation.MetricsRecord:
    """EF-MSE and eigenvalue errors for one trained model.

    extractor "direct" reads ordered estimates straight off the encoder
    (joint/sequential nesting) with eigenvalues from the Rayleigh quotient;
    "rr" applies the finalized rotation and reads its eigenvalues.
    """
    eval_seed = cfg.seed if seed is None else seed
    rng = RngState(eval_seed).substream("eval")
    offset = 1 if cfg.train_center else 0
    if extractor == "direct":
        predict = _direct_predictor(cfg, spec, net, rng)
        lam_hat = evaluation.estimate_eigenvalues(
            predict, spec, cfg.eval_samples, "rayleigh", rng
        )
    elif extractor == "rr":
        if transform is None:
            raise ConfigError("no rotation in checkpoint; run `spex rr` first")
        predict = _rr_predictor(net, transform)
        lam_hat = evaluation.estimate_eigenvalues(
            predict, spec, 1, "from_transform", rng, transform=transform
        )
    else:
        raise ConfigError(f"unknown extractor {extractor!r}")
    lam_true = evaluation.true_targets(spec, cfg.model_d, offset)
    mse = evaluation.ef_mse(predict, spec, cfg.eval_samples, rng, offset)
    rae = np.abs(lam_true - lam_hat) / lam_true
    return evaluation.MetricsRecord(
        ef_mse=mse,
        ev_rae=rae,
        lambda_hat=np.asarray(lam_hat),
        lambda_true=lam_true,
        n_samples=cfg.eval_samples,
        seed=eval_seed,
    )


def write_metrics_csv(
    path: str,
    run_id: str,
    cfg: RunConfig,
    extractor: str,
    record: evaluation.MetricsRecord,
    wall_ms: float,
) -> None:
    rows = []
    base = [
        run_id,
        str(record.seed),
        cfg.kernel_kind,
        str(cfg.kernel_p),
        str(cfg.kernel_r),
        str(cfg.model_d),
        cfg.train_objective,
        cfg.nesting_mode,
        extractor,
    ]
    for i in range(cfg.model_d):
        rows.append(
            base
            + [
                str(i + 1),
                _fmt(record.ef_mse[i]),
                _fmt(record.ev_rae[i]),
                _fmt(record.lambda_hat[i]),
                _fmt(record.lambda_true[i]),
                str(cfg.train_steps),
                _fmt(wall_ms),
            ]
        )
    rows.append(
        base
        + [
            "mean",
            _fmt(record.mean_ef_mse),
            _fmt(record.mean_ev_rae),
            _fmt(record.lambda_hat.mean()),
            _fmt(record.lambda_true.mean()),
            str(cfg.train_steps),
            _fmt(wall_ms),
        ]
    )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")
        writer = csv.writer(fh)
        writer.writerows(rows)


def aggregate(values) -> tuple[float, float]:
    """Mean and standard error over per-seed results."""
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    stderr = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return mean, stderr


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _load_run_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "fast", False):
        overrides.update(FAST_OVERRIDES)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out.dir"] = args.out
    return parse_config_file(args.config, overrides)


def _run_dir(cfg: RunConfig, config_path: str) -> str:
    if cfg.out_dir:
        path = cfg.out_dir
    else:
        stem = os.path.splitext(os.path.basename(config_path))[0]
        path = os.path.join("runs", stem)
    os.makedirs(path, exist_ok=True)
    return path


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out_dir = _run_dir(cfg, args.config)
    cfg.out_dir = out_dir
    spec = build_spec(cfg)
    net = network_from_config(cfg)
    tcfg = train_config_from_run(cfg)
    started = time.perf_counter()
    try:
        result = train(spec, net, tcfg)
    except TrainingDiverged as exc:
        sys.stderr.write(f"training diverged at step {exc.step}; saving last good state\n")
        rescue = exc.last_good[0]
        save_checkpoint(os.path.join(out_dir, "checkpoint.spex"), cfg, rescue)
        return 3
    elapsed = time.perf_counter() - started
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
    save_checkpoint(os.path.join(out_dir, "checkpoint.spex"), cfg, result.net)
    with open(os.path.join(out_dir, "loss.csv"), "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, value in result.trace:
            fh.write(f"{step},{_fmt(value)}\n")
    report.plot_loss(result.trace, os.path.join(out_dir, "loss.png"))
    print(f"trained {cfg.train_objective}/{cfg.nesting_mode} for {cfg.train_steps} steps "
          f"in {elapsed:.1f}s -> {out_dir}")
    return 0


def _stream_transform(cfg: RunConfig, spec: KernelSpec, net, samples: int, seed: int):
    mode = _RR_MODE.get(cfg.train_objective)
    if mode is None:
        raise ConfigError(f"Rayleigh-Ritz extraction is undefined for {cfg.train_objective}")
    raw = _encoder_fn(net)
    state = rr.new_stream(mode, cfg.model_d)
    rng = RngState(seed).substream("rr")
    remaining, chunk_id = samples, 0
    while remaining > 0:
        m = min(remaining, 8192)
        batch = sample_pairs(spec, rng.substream(chunk_id), m)
        state = rr.stream_update(state, raw(batch.a), raw(batch.aplus))
        remaining -= m
        chunk_id += 1
    return rr.finalize(state)


def cmd_rr(args) -> int:
    cfg, net, _ = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else cfg.seed
    spec = build_spec(cfg)
    samples = args.samples if args.samples is not None else cfg.eval_samples
    transform = _stream_transform(cfg, spec, net, samples, seed)
    save_checkpoint(args.checkpoint, cfg, net, transform)
    lam = ", ".join(f"{v:.5f}" for v in transform.eigenvalues)
    print(f"rotation ({transform.mode}) appended to {args.checkpoint}; eigenvalues [{lam}]")
    return 0


def cmd_eval(args) -> int:
    cfg, net, transform = load_checkpoint(args.checkpoint)
    if args.samples is not None:
        cfg.eval_samples = args.samples
    seed = args.seed if args.seed is not None else cfg.seed
    extractor = args.extractor or ("rr" if transform is not None else "direct")
    spec = build_spec(cfg)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    started = time.perf_counter()
    record = evaluate_model(cfg, spec, net, transform, extractor, seed=seed)
    wall_ms = (time.perf_counter() - started) * 1e3
    run_id = os.path.basename(os.path.normpath(out_dir))
    write_metrics_csv(
        os.path.join(out_dir, "metrics.csv"), run_id, cfg, extractor, record, wall_ms
    )
    offset = 1 if cfg.train_center else 0
    rng = RngState(seed).substream("eval")
    predict = (
        _rr_predictor(net, transform)
        if extractor == "rr"
        else _direct_predictor(cfg, spec, net, rng)
    )
    report.plot_eigenfunctions(
        spec, predict, cfg.model_d, os.path.join(out_dir, "eigenfunctions.png"), offset
    )
    if args.truncation:
        prefixes = list(range(cfg.model_d + 1))
        errors, optima = evaluation.truncation_curve(
            predict,
            record.lambda_hat,
            spec,
            prefixes,
            min(cfg.eval_samples, 4000),
            rng,
            index_offset=offset,
        )
        with open(os.path.join(out_dir, "truncation.csv"), "w", encoding="utf-8") as fh:
            fh.write("prefix,error,optimum\n")
            for q, e, o in zip(prefixes, errors, optima):
                fh.write(f"{q},{_fmt(e)},{_fmt(o)}\n")
        report.plot_truncation(prefixes, errors, optima, os.path.join(out_dir, "truncation.png"))
    print(
        f"{run_id} [{extractor}] mean EF-MSE {record.mean_ef_mse:.6f}, "
        f"mean EV-RAE {record.mean_ev_rae:.6f}"
    )
    return 0


def cmd_oracle(args) -> int:
    cfg = _load_run_config(args)
    out_dir = _run_dir(cfg, args.config)
    spec = build_spec(cfg)
    k = args.k or spec.r
    kernel_fn = lambda a, b: (basis_matrix(spec, a) * spec.eigenvalues) @ basis_matrix(spec, b).T
    result = evaluation.grid_oracle(kernel_fn, spec.p, args.nodes, k, RngState(cfg.seed))
    with open(os.path.join(out_dir, "oracle.csv"), "w", encoding="utf-8") as fh:
        fh.write("index,lambda_true,lambda_grid,abs_err\n")
        for i in range(k):
            true = spec.eigenvalues[i] if i < spec.r else 0.0
            fh.write(
                f"{i + 1},{_fmt(true)},{_fmt(result.eigenvalues[i])},"
                f"{_fmt(abs(true - result.eigenvalues[i]))}\n"
            )
    print(f"grid oracle ({args.nodes} nodes/axis) written to {out_dir}/oracle.csv")
    return 0


def cmd_sample(args) -> int:
    from .trainer import pretrain_pool

    cfg = _load_run_config(args)
    out_dir = _run_dir(cfg, args.config)
    spec = build_spec(cfg)
    n = args.count if args.count is not None else cfg.eval_samples
    path = os.path.join(out_dir, "pool.npz")
    pretrain_pool(spec, RngState(cfg.seed), n, path)
    # post-persistence sanity: diagonal pair moments vs the spectrum
    from .trainer import load_pool

    pool = load_pool(path)
    pa = basis_matrix(spec, pool.a)
    pb = basis_matrix(spec, pool.aplus)
    with open(os.path.join(out_dir, "pool_stats.csv"), "w", encoding="utf-8") as fh:
        fh.write("index,moment,target,stderr\n")
        for i in range(spec.r):
            prods = pa[:, i] * pb[:, i]
            fh.write(
                f"{i + 1},{_fmt(prods.mean())},{_fmt(spec.eigenvalues[i])},"
                f"{_fmt(prods.std(ddof=1) / np.sqrt(n))}\n"
            )
    print(f"{n} pairs written to {path}")
    return 0


def cmd_table1(args) -> int:
    config_paths = sorted(
        os.path.join(args.config_dir, name)
        for name in os.listdir(args.config_dir)
        if name.endswith(".txt")
    )
    if not config_paths:
        raise ConfigError(f"no grid configs (*.txt) in {args.config_dir}")
    out_dir = args.out or os.path.join(args.config_dir, "table1")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for path in config_paths:
        overrides = dict(FAST_OVERRIDES) if args.fast else {}
        base_cfg = parse_config_file(path, overrides)
        extractor = "rr" if base_cfg.nesting_mode == "none" else "direct"
        cell = os.path.splitext(os.path.basename(path))[0]
        per_seed_mse, per_seed_rae = [], []
        for s in range(args.seeds):
            cfg = parse_config_file(path, {**overrides, "seed": base_cfg.seed + s})
            spec = build_spec(cfg)
            net = network_from_config(cfg)
            result = train(spec, net, train_config_from_run(cfg))
            transform = None
            if extractor == "rr":
                transform = _stream_transform(cfg, spec, result.net, cfg.eval_samples, cfg.seed)
            record = evaluate_model(cfg, spec, result.net, transform, extractor)
            per_seed_mse.append(record.mean_ef_mse)
            per_seed_rae.append(record.mean_ev_rae)
            print(
                f"  {cell} seed {cfg.seed}: EF-MSE {record.mean_ef_mse:.4f} "
                f"EV-RAE {record.mean_ev_rae:.4f}"
            )
        mse_mean, mse_err = aggregate(per_seed_mse)
        rae_mean, rae_err = aggregate(per_seed_rae)
        rows.append(
            {
                "cell": cell,
                "objective": base_cfg.train_objective,
                "extractor": extractor,
                "kernel": base_cfg.kernel_kind,
                "r": base_cfg.kernel_r,
                "d": base_cfg.model_d,
                "seeds": args.seeds,
                "ef_mse_mean": mse_mean,
                "ef_mse_stderr": mse_err,
                "ev_rae_mean": rae_mean,
                "ev_rae_stderr": rae_err,
            }
        )
    table_path = os.path.join(out_dir, "table1.csv")
    with open(table_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    k: (_fmt(v) if isinstance(v, float) else v)
                    for k, v in row.items()
                }
            )
    report.plot_table(rows, os.path.join(out_dir, "table1.png"))
    print(f"aggregated {len(rows)} cells x {args.seeds} seeds -> {table_path}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spex", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="run config path")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--fast", action="store_true", help="reduced test-mode budgets")

    p_train = sub.add_parser("train", help="train an encoder and write a checkpoint")
    common(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_rr = sub.add_parser("rr", help="append a Rayleigh-Ritz rotation to a checkpoint")
    p_rr.add_argument("--checkpoint", required=True)
    p_rr.add_argument("--samples", type=int, default=None, help="pair budget")
    p_rr.add_argument("--seed", type=int, default=None)
    p_rr.set_defaults(fn=cmd_rr)

    p_eval = sub.add_parser("eval", help="metrics CSV and figures for a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--samples", type=int, default=None)
    p_eval.add_argument("--extractor", choices=("direct", "rr"), default=None)
    p_eval.add_argument("--truncation", action="store_true", help="also write the truncation curve")
    p_eval.set_defaults(fn=cmd_eval)

    p_oracle = sub.add_parser("oracle", help="quadrature oracle vs the analytic spectrum")
    common(p_oracle)
    p_oracle.add_argument("--nodes", type=int, default=1024, help="grid nodes per axis")
    p_oracle.add_argument("-k", type=int, default=None, help="eigenpairs to extract")
    p_oracle.set_defaults(fn=cmd_oracle)

    p_sample = sub.add_parser("sample", help="draw and persist a pair pool")
    common(p_sample)
    p_sample.add_argument("--count", type=int, default=None, help="number of pairs")
    p_sample.set_defaults(fn=cmd_sample)

    p_table = sub.add_parser("table1", help="aggregate a grid of runs, mean +/- stderr")
    p_table.add_argument("--config-dir", required=True)
    p_table.add_argument("--out", default=None)
    p_table.add_argument("--seeds", type=int, default=5)
    p_table.add_argument("--fast", action="store_true")
    p_table.set_defaults(fn=cmd_table1)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, ContractViolation) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except TrainingDiverged as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 3
    except rr.RankDeficiencyError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 4


if __name__ == "__main__":
    sys.exit(main())
