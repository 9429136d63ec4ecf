"""SPEX1 binary checkpoint: config snapshot, parameters, optional rotation.

Layout (all integers little-endian):

    magic           5 bytes  b"SPEX1"
    version         u32      currently 1
    config          u32 byte length + UTF-8 canonical config text
    n_encoders      u32      1, or 2 for the two-encoder SVD objective
    n_widths        u32      followed by u32 widths (features .. d)
    per encoder, in declared layer order:
        W_0, b_0, ..., W_L, b_L, output_offset   raw float64 LE, row-major
    rr_present      u8
    if present:     mode u8 (1 = rq, 2 = vicreg, 3 = scl), d u32,
                    U (d*d f64), eigenvalues (d f64),
                    has_mean u8 [+ d f64], has_scale u8 [+ d f64]

Writing is deterministic, so re-running the same config reproduces the file
byte for byte. Version mismatches are rejected with a message.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .config import ConfigError, RunConfig, parse_config, serialize_config
from .nn import EncoderPair, FeatureMap, Network
from .numerics import RngState
from .rayleigh_ritz import RRTransform

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "network_from_config"]

MAGIC = b"SPEX1"
VERSION = 1
_MODE_CODE = {"rq": 1, "vicreg": 2, "scl": 3}
_CODE_MODE = {v: k for k, v in _MODE_CODE.items()}


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint."""


def _write_array(buf: io.BytesIO, arr: np.ndarray) -> None:
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(buf: io.BytesIO, shape) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    raw = buf.read(8 * count)
    if len(raw) != 8 * count:
        raise CheckpointError("truncated checkpoint: parameter section too short")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def network_from_config(cfg: RunConfig, rng: RngState | None = None):
    """Instantiate the encoder (or pair) an effective config describes."""
    feature_kind = cfg.features_kind or (
        "polynomial" if cfg.kernel_kind == "legendre" else "fourier"
    )
    degree = cfg.features_degree if cfg.features_degree >= 0 else cfg.kernel_r
    fmap = FeatureMap(kind=feature_kind, p=cfg.kernel_p, degree=degree)
    hidden = [cfg.model_width] * cfg.model_layers
    partition = (
        [[i] for i in range(cfg.model_d)] if cfg.nesting_mode == "sequential" else None
    )
    base = rng if rng is not None else RngState(cfg.seed)

    def make(tag: str) -> Network:
        return Network(
            feature_map=fmap,
            hidden=hidden,
            d=cfg.model_d,
            rng=base.substream(tag),
            head_partition=partition,
        )

    if cfg.train_objective == "lora_svd":
        return EncoderPair(phi=make("init-phi"), psi=make("init-psi"))
    return make("init-psi")


def save_checkpoint(
    path: str,
    cfg: RunConfig,
    net,
    transform: RRTransform | None = None,
) -> None:
    nets = [net.phi, net.psi] if isinstance(net, EncoderPair) else [net]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    config_bytes = serialize_config(cfg).encode("utf-8")
    buf.write(struct.pack("<I", len(config_bytes)))
    buf.write(config_bytes)
    buf.write(struct.pack("<I", len(nets)))
    widths = nets[0].widths
    buf.write(struct.pack("<I", len(widths)))
    buf.write(struct.pack(f"<{len(widths)}I", *widths))
    for one in nets:
        if one.widths != widths:
            raise CheckpointError("encoder pair must share an architecture")
        for arr in one.parameter_arrays():
            _write_array(buf, arr)
    if transform is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<B", _MODE_CODE[transform.mode]))
        d = transform.u.shape[0]
        buf.write(struct.pack("<I", d))
        _write_array(buf, transform.u)
        _write_array(buf, transform.eigenvalues)
        for opt in (transform.mean, transform.scale):
            if opt is None:
                buf.write(struct.pack("<B", 0))
            else:
                buf.write(struct.pack("<B", 1))
                _write_array(buf, opt)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_struct(buf: io.BytesIO, fmt: str):
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise CheckpointError("truncated checkpoint header")
    return struct.unpack(fmt, raw)


def load_checkpoint(path: str):
    """Returns (cfg, net_or_pair, transform_or_None)."""
    try:
        with open(path, "rb") as fh:
            buf = io.BytesIO(fh.read())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a SPEX1 checkpoint")
    (version,) = _read_struct(buf, "<I")
    if version != VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} unsupported (expected {VERSION})"
        )
    (config_len,) = _read_struct(buf, "<I")
    raw_cfg = buf.read(config_len)
    if len(raw_cfg) != config_len:
        raise CheckpointError("truncated checkpoint: config snapshot too short")
    try:
        cfg = parse_config(raw_cfg.decode("utf-8"))
    except (ConfigError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"invalid embedded config: {exc}") from exc
    (n_encoders,) = _read_struct(buf, "<I")
    (n_widths,) = _read_struct(buf, "<I")
    widths = list(_read_struct(buf, f"<{n_widths}I"))
    net = network_from_config(cfg)
    nets = [net.phi, net.psi] if isinstance(net, EncoderPair) else [net]
    if len(nets) != n_encoders or nets[0].widths != widths:
        raise CheckpointError("checkpoint architecture does not match its config snapshot")
    for one in nets:
        arrays = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            arrays.append(_read_array(buf, (fan_in, fan_out)))
            arrays.append(_read_array(buf, (fan_out,)))
        arrays.append(_read_array(buf, (widths[-1],)))
        one.set_parameter_arrays(arrays)
    (rr_present,) = _read_struct(buf, "<B")
    transform = None
    if rr_present:
        (mode_code,) = _read_struct(buf, "<B")
        if mode_code not in _CODE_MODE:
            raise CheckpointError(f"unknown rotation mode code {mode_code}")
        (d,) = _read_struct(buf, "<I")
        u = _read_array(buf, (d, d))
        eigenvalues = _read_array(buf, (d,))
        opts = []
        for _ in range(2):
            (flag,) = _read_struct(buf, "<B")
            opts.append(_read_array(buf, (d,)) if flag else None)
        transform = RRTransform(
            mode=_CODE_MODE[mode_code],
            u=u,
            eigenvalues=eigenvalues,
            mean=opts[0],
            scale=opts[1],
        )
    return cfg, net, transform
