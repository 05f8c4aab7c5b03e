"""Checkpoint file format.

Layout (all integers little-endian)::

    8 bytes   magic  b"MSTGCKPT"
    4 bytes   uint32 format version
    8 bytes   uint64 header length N
    N bytes   UTF-8 JSON header
    ...       raw parameter blocks

The header holds the network spec, the training config, the epoch counter,
the loss history, a SHA-256 of the payload and one entry per block:
``{"name", "dtype", "shape", "offset", "nbytes"}`` with ``offset`` relative
to the start of the payload. Parameter blocks are ``<f4`` (or ``<f8`` for
double-precision models); Adam moments are stored under ``optim.*`` names.
"""
import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .stego_net import NetworkSpec, StegoNet
from .training import Checkpoint, LossReport

MAGIC = b"MSTGCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def _blocks_from_optimizer(prefix, state_dict):
    out = {}
    for idx, st in state_dict["state"].items():
        for key in ("step", "exp_avg", "exp_avg_sq"):
            if key in st:
                t = torch.as_tensor(st[key])
                if t.dtype not in _DTYPES:
                    t = t.to(torch.float64)
                out[f"optim.{prefix}.{idx}.{key}"] = t
    return out


def _optimizer_from_blocks(blocks, prefix, groups):
    state = {}
    for name, t in blocks.items():
        parts = name.split(".")
        if parts[0] != "optim" or parts[1] != prefix:
            continue
        idx, key = int(parts[2]), parts[3]
        state.setdefault(idx, {})[key] = t.to(torch.float32) if key == "step" else t
    return {"state": state, "param_groups": groups}


def save_checkpoint(ckpt, path):
    """Atomically write ``ckpt`` to ``path`` (temp file in the same dir, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {n: p.detach() for n, p in ckpt.model.state_dict().items()}
    opt_groups = {}
    if ckpt.optimizer_state:
        for prefix, sd in ckpt.optimizer_state.items():
            tensors.update(_blocks_from_optimizer(prefix, sd))
            opt_groups[prefix] = sd["param_groups"]

    blocks, chunks, offset = [], [], 0
    for name, t in tensors.items():
        dtype = _DTYPES.get(t.dtype)
        if dtype is None:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = np.ascontiguousarray(t.cpu().numpy(), dtype=dtype).tobytes()
        blocks.append({"name": name, "dtype": dtype, "shape": list(t.shape),
                       "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    config = ckpt.config.to_dict() if hasattr(ckpt.config, "to_dict") else ckpt.config
    header = {
        "format_version": FORMAT_VERSION,
        "spec": ckpt.model.spec.to_dict(),
        "config": config,
        "epoch": ckpt.epoch,
        "history": [[r.cover_term, r.secret_terms] for r in ckpt.history],
        "optimizer_groups": opt_groups,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "payload_nbytes": len(payload),
        "blocks": blocks,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)))
            fh.write(hbytes)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_header(path):
    with open(path, "rb") as fh:
        return _read_header(fh, Path(path))


def _read_header(fh, path):
    prefix = fh.read(_PREFIX.size)
    if len(prefix) < _PREFIX.size:
        raise CorruptCheckpointError(f"{path}: truncated header")
    magic, version, hlen = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    hbytes = fh.read(hlen)
    if len(hbytes) < hlen:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        return json.loads(hbytes)
    except ValueError as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc


def load_checkpoint(path, k=None):
    """Read a checkpoint. ``k``, if given, must match the stored secret count."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    if len(payload) != header["payload_nbytes"]:
        raise CorruptCheckpointError(
            f"{path}: payload is {len(payload)} bytes, expected {header['payload_nbytes']}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptCheckpointError(f"{path}: payload checksum mismatch")

    spec = NetworkSpec.from_dict(header["spec"])
    if k is not None and k != spec.k:
        raise CheckpointError(f"{path}: checkpoint hides k={spec.k} secrets, requested k={k}")
    tensors = {}
    for b in header["blocks"]:
        arr = np.frombuffer(payload, dtype=b["dtype"], count=int(np.prod(b["shape"], dtype=np.int64)),
                            offset=b["offset"]).reshape(b["shape"])
        tensors[b["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))

    params = {n: t for n, t in tensors.items() if not n.startswith("optim.")}
    dtype = next(iter(params.values())).dtype
    model = StegoNet(spec).to(dtype)
    model.load_state_dict(params, strict=True)

    opt_state = None
    if header["optimizer_groups"]:
        opt_state = {
            prefix: _optimizer_from_blocks(tensors, prefix, groups)
            for prefix, groups in header["optimizer_groups"].items()
        }
    config = header["config"]
    if isinstance(config, dict) and config:
        config = TrainConfig.from_dict(config)
    history = [LossReport.from_terms(c, s) for c, s in header["history"]]
    return Checkpoint(model, config, header["epoch"], history, opt_state, header["format_version"])


def fingerprint(model):
    """SHA-256 over parameter names and bytes, for identifying a model in reports."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]
