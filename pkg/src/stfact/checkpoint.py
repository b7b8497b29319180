"""Checkpoint serialization: one raw float64 blob plus a JSON manifest.

A checkpoint holds the generative parameters, the variational store
(per-instance lambda plus posterior nets), the model configuration, and
optionally Adam optimizer state.  Segments are concatenated in manifest
order into `<prefix>.f64`; `<prefix>.manifest.json` records group, name,
shape, and dtype for each segment so loading is unambiguous.  Writes are
byte-stable: saving the same state twice produces identical files.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .data import VoxelGrid
from .errors import DataError
from .generative import ModelConfig
from .nn import AdamState, ParamVector
from .variational import VariationalStore

Array = np.ndarray

FORMAT = "stfact-checkpoint-v1"

_GROUPS = ("theta", "lam", "phi")


def _config_to_dict(config: ModelConfig) -> dict:
    d = dataclasses.asdict(config)
    d.pop("fixed_factors", None)  # stored as a blob segment, not JSON
    return d


def _segments_from_state(
    theta: ParamVector,
    store: VariationalStore,
    opt: dict[str, AdamState] | None,
) -> list[tuple[str, str, Array]]:
    """(group, name, array) triples in a deterministic order."""
    out: list[tuple[str, str, Array]] = []
    for group, pv in (("theta", theta), ("lam", store.lam), ("phi", store.phi)):
        for name in pv.names():
            out.append((group, name, pv[name]))
    if store.config.fixed_factors is not None:
        out.append(("const", "fixed_factors", store.config.fixed_factors))
    if opt:
        for group in sorted(opt):
            state = opt[group]
            for name in sorted(state.m):
                out.append((f"opt.{group}.m", name, state.m[name]))
                out.append((f"opt.{group}.v", name, state.v[name]))
                step = state.step[name]
                if isinstance(step, np.ndarray):
                    out.append((f"opt.{group}.step", name, step))
                else:
                    out.append((f"opt.{group}.step", name, np.array(step, dtype=np.int64)))
    return out


def save_checkpoint(
    prefix,
    theta: ParamVector,
    store: VariationalStore,
    opt: dict[str, AdamState] | None = None,
    grid: VoxelGrid | None = None,
    meta: dict | None = None,
) -> Path:
    """Write `<prefix>.f64` + `<prefix>.manifest.json`; returns the manifest path."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    segments = _segments_from_state(theta, store, opt)
    manifest_segments = []
    chunks = []
    for group, name, arr in segments:
        arr = np.asarray(arr)
        dtype = "i8" if arr.dtype.kind == "i" else "f8"
        manifest_segments.append(
            {"group": group, "name": name, "shape": list(arr.shape), "dtype": dtype}
        )
        chunks.append(np.ascontiguousarray(arr, dtype=f"<{dtype}").tobytes())
    manifest = {
        "format": FORMAT,
        "model_config": _config_to_dict(store.config),
        "n": store.n,
        "t": store.t,
        "instance_ids": list(store.instance_ids),
        "segments": manifest_segments,
        "meta": meta or {},
    }
    if grid is not None:
        manifest["grid"] = grid.positions.tolist()
    blob = prefix.with_suffix(prefix.suffix + ".f64")
    blob.write_bytes(b"".join(chunks))
    manifest_path = prefix.with_suffix(prefix.suffix + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path


@dataclasses.dataclass
class Checkpoint:
    theta: ParamVector
    store: VariationalStore
    opt: dict[str, AdamState] | None
    grid: VoxelGrid | None
    meta: dict


def _checkpoint_prefix(path: Path) -> Path:
    name = path.name
    for suffix in (".manifest.json", ".f64"):
        if name.endswith(suffix):
            return path.with_name(name[: -len(suffix)])
    return path


def load_checkpoint(path) -> Checkpoint:
    """Load from a prefix, `.f64`, or `.manifest.json` path."""
    prefix = _checkpoint_prefix(Path(path))
    manifest_path = prefix.with_suffix(prefix.suffix + ".manifest.json")
    blob_path = prefix.with_suffix(prefix.suffix + ".f64")
    if not manifest_path.exists():
        raise DataError(f"checkpoint manifest not found: {manifest_path}")
    if not blob_path.exists():
        raise DataError(f"checkpoint blob not found: {blob_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise DataError(f"not a checkpoint manifest: {manifest_path}")

    raw = blob_path.read_bytes()
    arrays: dict[tuple[str, str], Array] = {}
    offset = 0
    for seg in manifest["segments"]:
        shape = tuple(seg["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise DataError("checkpoint blob is shorter than its manifest claims")
        arr = np.frombuffer(raw, dtype=f"<{seg['dtype']}", count=count, offset=offset)
        arrays[(seg["group"], seg["name"])] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise DataError("checkpoint blob has trailing bytes beyond its manifest")

    cfg_dict = dict(manifest["model_config"])
    fixed = arrays.get(("const", "fixed_factors"))
    if fixed is not None:
        cfg_dict["fixed_factors"] = fixed
    config = ModelConfig(**cfg_dict)

    pvs = {g: ParamVector() for g in _GROUPS}
    for (group, name), arr in arrays.items():
        if group in pvs:
            pvs[group].add(name, arr)

    opt: dict[str, AdamState] | None = None
    opt_groups = {g.split(".")[1] for g, _ in arrays if g.startswith("opt.")}
    if opt_groups:
        opt = {}
        for group in sorted(opt_groups):
            m = {n: a for (g, n), a in arrays.items() if g == f"opt.{group}.m"}
            v = {n: a for (g, n), a in arrays.items() if g == f"opt.{group}.v"}
            step = {}
            for (g, n), a in arrays.items():
                if g == f"opt.{group}.step":
                    step[n] = a if a.ndim else int(a)
            opt[group] = AdamState(m=m, v=v, step=step)

    store = VariationalStore(
        lam=pvs["lam"],
        phi=pvs["phi"],
        n=int(manifest["n"]),
        t=int(manifest["t"]),
        config=config,
        instance_ids=list(manifest["instance_ids"]),
    )
    grid = None
    if "grid" in manifest:
        grid = VoxelGrid(np.asarray(manifest["grid"], dtype=np.float64))
    return Checkpoint(
        theta=pvs["theta"], store=store, opt=opt, grid=grid, meta=manifest.get("meta", {})
    )
