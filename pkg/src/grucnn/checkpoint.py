"""Binary checkpoints carrying everything a resumed run needs.

Layout: ``b"GRCK"`` magic, little-endian u32 format version, u64 header
length, a canonical-JSON header, then the raw array bytes back to back
in header order.  The header embeds the model spec together with its
sha256 so a checkpoint can be rejected when it does not belong to the
experiment trying to load it, plus the optimizer hyperparameters and
accumulators, the dropout generator state, and the epoch counter.

Saving the result of a load reproduces the original file byte for byte;
that (plus the seeded data stream) is what makes "train N epochs" and
"train k, reload, train N-k" land on identical parameters in 64-bit
mode.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct

import numpy as np

from . import model as model_mod
from .train import RmsProp

MAGIC = b"GRCK"
VERSION = 1
_DTYPES = {"float32": np.float32, "float64": np.float64}


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or mismatched checkpoint file."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def spec_hash(spec_dict) -> str:
    """sha256 over the canonical JSON form of a model spec dict."""
    return hashlib.sha256(canonical_json(spec_dict)).hexdigest()


@dataclasses.dataclass
class CheckpointBundle:
    model: object
    optimizer: object
    rng: object
    epoch: int


def _le(arr):
    a = np.ascontiguousarray(arr)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path, model, optimizer=None, rng=None, epoch=0):
    """Write the model (and optional optimizer / RNG state) to ``path``."""
    arrays = []   # (index entry, bytes)
    offset = 0

    def push(section, name, arr):
        nonlocal offset
        a = _le(arr)
        raw = a.tobytes()
        arrays.append(({"section": section, "name": name,
                        "shape": list(a.shape), "dtype": a.dtype.str,
                        "offset": offset, "nbytes": len(raw)}, raw))
        offset += len(raw)

    for name, t in model.parameters():
        push("param", name, t.data)
    for name, b in model.buffers():
        push("buffer", name, b)

    opt_header = None
    if optimizer is not None:
        opt_header = {"lr0": optimizer.lr0, "decay": optimizer.decay,
                      "rho": optimizer.rho, "eps": optimizer.eps,
                      "step_index": optimizer.step_index}
        for name, _ in model.parameters():
            if name in optimizer.accumulators:
                push("opt", name, optimizer.accumulators[name])

    spec_dict = model.spec.to_dict()
    header = {
        "spec": spec_dict,
        "spec_hash": spec_hash(spec_dict),
        "dtype": np.dtype(model.dtype).name,
        "epoch": int(epoch),
        "optimizer": opt_header,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "arrays": [e for e, _ in arrays],
    }
    header_bytes = canonical_json(header)

    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header_bytes)))
        f.write(header_bytes)
        for _, raw in arrays:
            f.write(raw)
    os.replace(tmp, path)
    return path


def _read_header(f, path):
    magic = f.read(4)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    fixed = f.read(12)
    if len(fixed) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", fixed)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, reader supports {VERSION}")
    raw = f.read(hlen)
    if len(raw) < hlen:
        raise CheckpointError(f"{path}: truncated header ({len(raw)} of {hlen} bytes)")
    try:
        return json.loads(raw)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e


def peek_spec(path):
    """Read just the model spec and its stored hash without rebuilding."""
    with open(path, "rb") as f:
        header = _read_header(f, path)
    return header["spec"], header["spec_hash"]


def load_checkpoint(path, expected_hash=None):
    """Rebuild model, optimizer, and RNG from a checkpoint file.

    The spec hash stored in the file is recomputed and verified; pass
    ``expected_hash`` to additionally pin the checkpoint to a known
    architecture (the eval path does this against its config).
    """
    with open(path, "rb") as f:
        header = _read_header(f, path)
        blob = f.read()

    stored = header["spec_hash"]
    actual = spec_hash(header["spec"])
    if stored != actual:
        raise CheckpointError(
            f"{path}: spec hash mismatch (file says {stored[:12]}..., "
            f"contents hash to {actual[:12]}...)")
    if expected_hash is not None and stored != expected_hash:
        raise CheckpointError(
            f"{path}: checkpoint is for architecture {stored[:12]}..., "
            f"expected {expected_hash[:12]}...")
    if header["dtype"] not in _DTYPES:
        raise CheckpointError(f"{path}: unknown dtype {header['dtype']!r}")

    sections = {"param": {}, "buffer": {}, "opt": {}}
    for entry in header["arrays"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blob):
            raise CheckpointError(f"{path}: truncated array data for {entry['name']}")
        arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]),
                            count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=start).reshape(entry["shape"]).copy()
        sections[entry["section"]][entry["name"]] = arr

    spec = model_mod.ModelSpec.from_dict(header["spec"])
    dtype = _DTYPES[header["dtype"]]
    model = model_mod.build_model(spec, np.random.default_rng(0), dtype=dtype)

    names = [n for n, _ in model.parameters()]
    if set(names) != set(sections["param"]):
        missing = set(names) - set(sections["param"])
        extra = set(sections["param"]) - set(names)
        raise CheckpointError(f"{path}: parameter set mismatch "
                              f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
    for name, t in model.parameters():
        saved = sections["param"][name]
        if saved.shape != t.data.shape:
            raise CheckpointError(f"{path}: {name} has shape {saved.shape}, "
                                  f"model wants {t.data.shape}")
        t.data[...] = saved
    for name, b in model.buffers():
        if name in sections["buffer"]:
            b[...] = sections["buffer"][name]

    optimizer = None
    if header["optimizer"] is not None:
        oh = header["optimizer"]
        optimizer = RmsProp(oh["lr0"], oh["decay"], oh["rho"], oh["eps"])
        optimizer.step_index = oh["step_index"]
        optimizer.accumulators = dict(sections["opt"])

    rng = None
    if header["rng_state"] is not None:
        rng = np.random.default_rng(0)
        rng.bit_generator.state = header["rng_state"]

    return CheckpointBundle(model=model, optimizer=optimizer, rng=rng,
                            epoch=header["epoch"])
