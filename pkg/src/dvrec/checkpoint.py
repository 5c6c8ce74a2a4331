"""The DVRC checkpoint container and full trainer save / resume.

Layout (all integers little-endian)::

    b"DVRC"  u32 version  u8 backbone tag  i64 m  i64 n  i64 d
    u32 record count  u64 metadata length
    records: u16 name length, name (utf-8), u8 dtype code, u8 ndim,
             i64 shape[ndim], u64 payload length, payload
    metadata: utf-8 JSON

Real arrays are stored as 64-bit floats so that a save/load round trip is
bitwise exact; boolean arrays (children masks) are packed bitsets.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import CacheFormatError
from .recmodel import AdamState, ModelParams
from .valuator import Block, ValuatorParams

MAGIC = b"DVRC"
VERSION = 1
BACKBONE_TAGS = {"mf": 0, "lightgcn": 1}
_DTYPES = {0: "<f8", 1: "<i8", 2: "bits"}
_CODES = {"f": 0, "i": 1, "u": 1, "b": 2}
_HEAD = struct.Struct("<4sIBqqqIQ")


def _encode(arr):
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype.kind)
    if code is None:
        raise TypeError(f"cannot store dtype {arr.dtype}")
    if code == 2:
        payload = np.packbits(arr.ravel()).tobytes()
    else:
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return code, payload


def save(path, arrays, meta, backbone="mf", m=0, n=0, d=0):
    """Write named arrays plus a JSON metadata document."""
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_HEAD.pack(MAGIC, VERSION, BACKBONE_TAGS[backbone], m, n, d, len(arrays), len(meta_bytes))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code, payload = _encode(arr)
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}q", *arr.shape))
        parts.append(struct.pack("<Q", len(payload)) + payload)
    parts.append(meta_bytes)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, blob, path):
        self.blob, self.off, self.path = blob, 0, path

    def take(self, size):
        if self.off + size > len(self.blob):
            raise CacheFormatError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.off:self.off + size]
        self.off += size
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load(path):
    """Read a DVRC file. Returns ``(header, arrays, meta)``.

    Nothing is returned unless the whole file parses: bad magic, an unknown
    version, truncation or trailing bytes raise :class:`CacheFormatError`.
    """
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CacheFormatError(f"{path}: not a DVRC checkpoint (bad magic)")
    r = _Reader(blob, path)
    magic, version, tag, m, n, d, count, meta_len = r.unpack(_HEAD.format)
    if version != VERSION:
        raise CacheFormatError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    tags = {v: k for k, v in BACKBONE_TAGS.items()}
    if tag not in tags:
        raise CacheFormatError(f"{path}: unknown backbone tag {tag}")
    arrays = {}
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CacheFormatError(f"{path}: unknown dtype code {code} for {name!r}")
        shape = r.unpack(f"<{ndim}q")
        (size,) = r.unpack("<Q")
        payload = r.take(size)
        count_items = int(np.prod(shape, dtype=np.int64))
        if code == 2:
            if size != (count_items + 7) // 8:
                raise CacheFormatError(f"{path}: bitset {name!r} has the wrong length")
            bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=count_items)
            arr = bits.astype(bool).reshape(shape)
        else:
            if size != 8 * count_items:
                raise CacheFormatError(f"{path}: record {name!r} has the wrong length")
            arr = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(shape)
            arr = arr.astype(np.float64 if code == 0 else np.int64)
        arrays[name] = arr
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    if r.off != len(blob):
        raise CacheFormatError(f"{path}: {len(blob) - r.off} trailing bytes")
    header = {"version": version, "backbone": tags[tag], "m": m, "n": n, "d": d}
    return header, arrays, meta


# -- model / optimizer packing ------------------------------------------------

def _adam_pack(prefix, opt, arrays):
    for k in opt.m:
        arrays[f"{prefix}.m.{k}"] = opt.m[k]
        arrays[f"{prefix}.v.{k}"] = opt.v[k]
    return {"names": list(opt.m), "lr": opt.lr, "weight_decay": opt.weight_decay, "beta1": opt.beta1,
            "beta2": opt.beta2, "eps": opt.eps, "step": opt.step, "skipped": opt.skipped}


def _adam_unpack(prefix, info, arrays):
    names = info["names"]
    return AdamState(
        {k: arrays[f"{prefix}.m.{k}"].copy() for k in names},
        {k: arrays[f"{prefix}.v.{k}"].copy() for k in names},
        info["lr"], info["weight_decay"], info["beta1"], info["beta2"], info["eps"], info["step"], info["skipped"],
    )


def _valuator_pack(prefix, params, arrays):
    arrays[f"{prefix}.W1"] = params.W1
    arrays[f"{prefix}.b1"] = params.b1
    arrays[f"{prefix}.W2"] = params.W2
    arrays[f"{prefix}.b2"] = params.b2
    for k, blk in enumerate(params.blocks):
        arrays[f"{prefix}.mask{k}"] = blk.mask
        arrays[f"{prefix}.A{k}"] = blk.A
        arrays[f"{prefix}.v{k}"] = blk.v
    return len(params.blocks)


def _valuator_unpack(prefix, n_blocks, arrays):
    blocks = [
        Block(arrays[f"{prefix}.mask{k}"].copy(), arrays[f"{prefix}.A{k}"].copy(), arrays[f"{prefix}.v{k}"].copy())
        for k in range(n_blocks)
    ]
    return ValuatorParams(arrays[f"{prefix}.W1"].copy(), arrays[f"{prefix}.b1"].copy(),
                          arrays[f"{prefix}.W2"].copy(), arrays[f"{prefix}.b2"].copy(), blocks)


def save_model(path, theta, valuator=None, meta=None):
    """Store just the recommender (and optionally a valuator)."""
    arrays = {"theta.P": theta.P, "theta.Q": theta.Q}
    info = dict(meta or {})
    info["layers"] = theta.layers
    if valuator is not None:
        info["valuator_blocks"] = _valuator_pack("valuator", valuator, arrays)
    save(path, arrays, info, theta.backbone, theta.n_users, theta.n_items, theta.d)


def load_model(path, train_pairs=None):
    """Return ``(theta, valuator_or_None, meta)`` from any DVRC file.

    LightGCN checkpoints need ``train_pairs`` to rebuild the adjacency.
    """
    from .recmodel import normalized_adjacency

    header, arrays, meta = load(path)
    adj = None
    if header["backbone"] == "lightgcn":
        if train_pairs is None:
            raise CacheFormatError("LightGCN checkpoint needs the training pairs to rebuild propagation")
        adj = normalized_adjacency(train_pairs, header["m"], header["n"])
    theta = ModelParams(arrays["theta.P"].copy(), arrays["theta.Q"].copy(), header["backbone"],
                        meta.get("layers", 2), adj)
    valuator = None
    if meta.get("valuator_blocks"):
        valuator = _valuator_unpack("valuator", meta["valuator_blocks"], arrays)
    return theta, valuator, meta


# -- whole-trainer state ------------------------------------------------------

def save_trainer(path, trainer):
    """Everything needed to continue a run exactly where it stopped."""
    import dataclasses

    t = trainer
    arrays = {"theta.P": t.theta.P, "theta.Q": t.theta.Q, "reward_users": t.reward_users}
    meta = {
        "config": t.config.to_dict(),
        "layers": t.theta.layers,
        "opt": _adam_pack("opt", t.opt, arrays),
        "state": dataclasses.asdict(t.state),
        "baseline": {"window": t.baseline.window, "direction": t.baseline.direction},
        "rngs": {k: g.bit_generator.state for k, g in t.rngs.items()},
        "trace": t.trace,
        "cosine": t.cosine,
        "pretrain_losses": t.pretrain_losses,
        "noise_w": t.noise_w,
    }
    arrays["baseline.delta"] = np.array([t.baseline.delta])
    if t.valuator is not None:
        meta["valuator_blocks"] = _valuator_pack("valuator", t.valuator, arrays)
        meta["mse_opt"] = _adam_pack("mse_opt", t.mse_opt, arrays)
        meta["policy_opt"] = _adam_pack("policy_opt", t.policy_opt, arrays)
    if t.best is not None:
        arrays["best.P"], arrays["best.Q"] = t.best[0].P, t.best[0].Q
        if t.best[1] is not None:
            meta["best_valuator_blocks"] = _valuator_pack("best_valuator", t.best[1], arrays)
    save(path, arrays, meta, t.theta.backbone, t.theta.n_users, t.theta.n_items, t.theta.d)


def load_trainer(path, dataset, corruptor=None):
    """Rebuild a :class:`~dvrec.trainer.Trainer` from :func:`save_trainer` output."""
    from .trainer import RunState, TrainConfig, Trainer

    header, arrays, meta = load(path)
    if "config" not in meta:
        raise CacheFormatError(f"{path}: model-only checkpoint cannot resume training")
    config = TrainConfig.from_dict(meta["config"])
    if (header["m"], header["n"]) != (dataset.n_users, dataset.n_items):
        raise CacheFormatError(f"{path}: checkpoint shape ({header['m']}, {header['n']}) does not match the dataset")
    t = Trainer(config, dataset, corruptor=corruptor)
    t.theta.P[...] = arrays["theta.P"]
    t.theta.Q[...] = arrays["theta.Q"]
    t.opt = _adam_unpack("opt", meta["opt"], arrays)
    if t.valuator is not None:
        t.valuator = _valuator_unpack("valuator", meta["valuator_blocks"], arrays)
        t.mse_opt = _adam_unpack("mse_opt", meta["mse_opt"], arrays)
        t.policy_opt = _adam_unpack("policy_opt", meta["policy_opt"], arrays)
    t.reward_users = arrays["reward_users"].copy()
    t.baseline.delta = float(arrays["baseline.delta"][0])
    t.state = RunState(**meta["state"])
    for name, state in meta["rngs"].items():
        t.rngs[name].bit_generator.state = state
    t.trace = meta["trace"]
    t.cosine = meta["cosine"]
    t.pretrain_losses = meta["pretrain_losses"]
    t.noise_w = meta["noise_w"]
    if "best.P" in arrays:
        best_theta = t.theta.copy()
        best_theta.P, best_theta.Q = arrays["best.P"].copy(), arrays["best.Q"].copy()
        best_val = None
        if meta.get("best_valuator_blocks"):
            best_val = _valuator_unpack("best_valuator", meta["best_valuator_blocks"], arrays)
        t.best = (best_theta, best_val)
    return t
