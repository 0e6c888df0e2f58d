"""Binary artifact formats and run-directory bookkeeping.

Dataset file (little-endian throughout):

    bytes 0-3    magic "CVGL"
    bytes 4-7    format version, u32 (currently 1)
    bytes 8-27   header: N, T, n_s, n_c, n_x as u32
    then per trajectory, float64 row-major blocks in the order
        Z_s (T*n_s), z_c (n_c), X (T*n_x), E_s (T*n_s), e_c (n_c)

Checkpoint file:

    bytes 0-3    magic "CVCK"
    bytes 4-7    format version, u32 (currently 1)
    bytes 8-11   header length L, u32
    bytes 12..   header: UTF-8 JSON with {"params": [{name, shape, offset}...],
                 "meta": {...}}; offsets are byte offsets into the data
                 section that starts at 12 + L
    then the raw float64 blocks

Both are readable without executing package code.  Writes go through a
".partial" rename so interrupted jobs never leave a truncated artifact
behind, and a file lock serializes writers per run directory.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import time
from pathlib import Path

import numpy as np
from filelock import FileLock

from flowident import networks as nets
from flowident import process as pr
from flowident import training as tn

DATASET_MAGIC = b"CVGL"
CHECKPOINT_MAGIC = b"CVCK"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Corrupt or unsupported artifact file; carries a byte offset."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path} @ byte {offset}: {message}")


def atomic_write(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str):
    atomic_write(path, text.encode("utf-8"))


def run_lock(run_dir):
    return FileLock(str(Path(run_dir) / ".lock"))


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


def write_dataset(ds, path):
    n = ds.n
    spec = ds.spec
    head = DATASET_MAGIC + struct.pack(
        "<6I", FORMAT_VERSION, n, spec.T, spec.n_s, spec.n_c, spec.n_x
    )
    blocks = [head]
    for k in range(n):
        blocks.append(ds.Z_s[k].astype("<f8").tobytes())
        blocks.append(ds.z_c[k].astype("<f8").tobytes())
        blocks.append(ds.X[k].astype("<f8").tobytes())
        blocks.append(ds.E_s[k].astype("<f8").tobytes())
        blocks.append(ds.e_c[k].astype("<f8").tobytes())
    atomic_write(path, b"".join(blocks))


def read_dataset(path, spec=None):
    """Read a dataset file; attaches ``spec`` when provided (else sidecar)."""
    raw = Path(path).read_bytes()
    if len(raw) < 28:
        raise FormatError(path, len(raw), "file shorter than header")
    if raw[:4] != DATASET_MAGIC:
        raise FormatError(path, 0, f"bad magic {raw[:4]!r}")
    version, n, t_len, n_s, n_c, n_x = struct.unpack("<6I", raw[4:28])
    if version != FORMAT_VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    per = 8 * (t_len * n_s + n_c + t_len * n_x + t_len * n_s + n_c)
    expect = 28 + n * per
    if len(raw) != expect:
        raise FormatError(path, min(len(raw), expect), f"expected {expect} bytes, have {len(raw)}")
    z_s = np.empty((n, t_len, n_s))
    z_c = np.empty((n, n_c))
    x = np.empty((n, t_len, n_x))
    e_s = np.empty((n, t_len, n_s))
    e_c = np.empty((n, n_c))
    off = 28
    for k in range(n):
        for arr, count in (
            (z_s[k], t_len * n_s),
            (z_c[k], n_c),
            (x[k], t_len * n_x),
            (e_s[k], t_len * n_s),
            (e_c[k], n_c),
        ):
            flat = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
            arr[...] = flat.reshape(arr.shape)
            off += 8 * count
    if spec is None:
        sidecar = Path(str(path) + ".json")
        if sidecar.exists():
            spec = pr.spec_from_json(sidecar.read_text())
    return pr.Dataset(spec=spec, Z_s=z_s, z_c=z_c, X=x, E_s=e_s, e_c=e_c)


def dataset_sidecar(ds):
    lat_var = ds.Z_s.reshape(-1, ds.Z_s.shape[-1]).var(axis=0)
    return {
        "format_version": FORMAT_VERSION,
        "spec": ds.spec.to_json_dict(),
        "summary": {
            "n_trajectories": int(ds.n),
            "latent_style_variance": [float(v) for v in lat_var],
            "content_variance": [float(v) for v in ds.z_c.var(axis=0)],
            "observation_mean": [float(v) for v in ds.X.reshape(-1, ds.X.shape[-1]).mean(axis=0)],
            "observation_std": [float(v) for v in ds.X.reshape(-1, ds.X.shape[-1]).std(axis=0)],
        },
    }


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def write_checkpoint(model, path):
    entries = []
    blobs = []
    offset = 0
    for name, arr in list(model.named_arrays()) + list(model.named_buffers()):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    meta = {
        "backend": model.backend,
        "step": model.step,
        "saturation": model.saturation.count,
        "model": {
            "n_s": model.model_cfg.n_s,
            "n_c": model.model_cfg.n_c,
            "n_x": model.model_cfg.n_x,
            "T": model.model_cfg.T,
            "variant": model.model_cfg.variant,
            "hidden": model.model_cfg.hidden,
            "flow_depth": model.model_cfg.flow_depth,
            "flow_width": model.model_cfg.flow_width,
            "cond_hidden": model.model_cfg.cond_hidden,
            "decoder_depth": model.model_cfg.decoder_depth,
            "decoder_slope": model.model_cfg.decoder_slope,
            "content_depth": model.model_cfg.content_depth,
            "disc_hidden": model.model_cfg.disc_hidden,
        },
    }
    header = json.dumps({"params": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    payload = (
        CHECKPOINT_MAGIC
        + struct.pack("<2I", FORMAT_VERSION, len(header))
        + header
        + b"".join(blobs)
    )
    atomic_write(path, payload)


def read_checkpoint(path):
    """Rebuild a FittedModel from a checkpoint file."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(path, len(raw), "file shorter than header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(path, 0, f"bad magic {raw[:4]!r}")
    version, hlen = struct.unpack("<2I", raw[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    if len(raw) < 12 + hlen:
        raise FormatError(path, 12, "truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(path, 12, f"undecodable header: {exc}")
    meta = header["meta"]
    m = meta["model"]
    model_cfg = tn.ModelConfig(
        n_s=m["n_s"],
        n_c=m["n_c"],
        n_x=m["n_x"],
        T=m["T"],
        variant=m["variant"],
        hidden=m["hidden"],
        flow_depth=m["flow_depth"],
        flow_width=m["flow_width"],
        cond_hidden=m["cond_hidden"],
        decoder_depth=m["decoder_depth"],
        decoder_slope=m["decoder_slope"],
        content_depth=m["content_depth"],
        disc_hidden=m["disc_hidden"],
    )
    shell_cfg = tn.TrainConfig(backend=meta["backend"], seed=0)
    model = tn.init_model(model_cfg, shell_cfg, np.zeros(m["n_x"]), np.ones(m["n_x"]))
    model.step = int(meta.get("step", 0))
    model.saturation.count = int(meta.get("saturation", 0))
    targets = dict(list(model.named_arrays()) + list(model.named_buffers()))
    data_start = 12 + hlen
    for entry in header["params"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        off = data_start + entry["offset"]
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(raw):
            raise FormatError(path, off, f"block {name} runs past end of file")
        if name not in targets:
            raise FormatError(path, off, f"unknown parameter {name!r}")
        if targets[name].shape != shape:
            raise FormatError(
                path, off, f"shape mismatch for {name}: {shape} vs {targets[name].shape}"
            )
        targets[name][...] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
    return model


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------


def code_version_hash():
    """Content hash over the package sources (stable per code state)."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def make_run_id(seed):
    stamp = time.strftime("%Y%m%d-%H%M%S")
    tag = hashlib.sha1(str(seed).encode()).hexdigest()[:8]
    return f"{stamp}-{tag}"


def write_manifest(run_dir, config_doc, artifacts, extra=None):
    doc = {
        "run_id": Path(run_dir).name,
        "created_unix": time.time(),  # wall-clock; excluded from comparisons
        "code_version": code_version_hash(),
        "config": config_doc,
        "artifacts": artifacts,
    }
    if extra:
        doc.update(extra)
    atomic_write_text(
        Path(run_dir) / "manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n"
    )
    return doc
