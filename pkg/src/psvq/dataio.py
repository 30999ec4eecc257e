"""Bit-exact serialization: the PSVQ1 container and the dataset archive.

Container byte layout (normative):

  offset 0   magic  b"PSVQ1\\n"
  offset 6   uint64 little-endian header length L
  offset 14  UTF-8 JSON header, canonical form (sorted keys), L bytes
  offset 14+L  array payloads, back to back, in header order

Header: {"version": 1, "kind": <str>, "meta": {...},
         "arrays": [{"name", "shape", "dtype", "crc32"}, ...]}.
Payloads are little-endian ("<f4" or "<i4"), C raster order.  Unknown
optional header fields are ignored on read (forward compatibility).
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MAGIC = b"PSVQ1\n"
VERSION = 1
# dataset payloads are <f4/<i4; the dictionary cache additionally uses <f8
_DTYPES = {"<f4": 4, "<i4": 4, "<f8": 8}


class ArchiveError(Exception):
    pass


class ChecksumError(ArchiveError):
    pass


class VersionError(ArchiveError):
    pass


def write_container(path, kind: str, meta: dict, arrays: dict) -> dict:
    """Write a PSVQ1 container atomically; returns the checksum manifest."""
    entries = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.integer):
            dtype = "<i4"
        elif arr.dtype == np.float64:
            dtype = "<f8"
        else:
            dtype = "<f4"
        buf = np.ascontiguousarray(arr.astype(dtype)).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "crc32": zlib.crc32(buf)})
        payloads.append(buf)
    header = {"version": VERSION, "kind": kind, "meta": meta, "arrays": entries}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(hbytes).to_bytes(8, "little"))
        fh.write(hbytes)
        for buf in payloads:
            fh.write(buf)
    os.replace(tmp, path)
    return {e["name"]: e["crc32"] for e in entries}


def read_container(path, expect_kind: Optional[str] = None):
    """Read a PSVQ1 container; returns (meta, {name: array})."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ArchiveError(f"{path}: bad magic {magic!r}")
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != VERSION:
            raise VersionError(
                f"{path}: unsupported version {header.get('version')}")
        if expect_kind is not None and header.get("kind") != expect_kind:
            raise ArchiveError(
                f"{path}: expected kind {expect_kind!r}, got "
                f"{header.get('kind')!r}")
        arrays = {}
        for entry in header["arrays"]:
            dtype = entry["dtype"]
            if dtype not in _DTYPES:
                raise ArchiveError(f"{path}: unsupported dtype {dtype}")
            itemsize = _DTYPES[dtype]
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = fh.read(count * itemsize)
            if len(buf) != count * itemsize:
                raise ArchiveError(
                    f"{path}: truncated array {entry['name']!r}")
            if zlib.crc32(buf) != entry["crc32"]:
                raise ChecksumError(
                    f"{path}: checksum mismatch in array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(
                buf, dtype=dtype).reshape(entry["shape"]).copy()
    return header["meta"], arrays


@dataclass
class DatasetArchive:
    """A per-slice dataset: signals, aux maps, masks, and optional truth."""
    schedule_doc: dict            # schedule + pools JSON document
    stage: str                    # "ssMT" | "APT"
    shape: tuple                  # (H, W)
    signals: np.ndarray           # (n, H, W) normalized trajectories
    t1_water: np.ndarray          # (H, W)
    t2_water: np.ndarray
    b0_shift: np.ndarray
    b1_scale: np.ndarray
    mask: np.ndarray              # (H, W) 1 = in-mask
    labels: np.ndarray            # (H, W) ROI label map, 0 = background
    roi_names: list
    truth_f: Optional[np.ndarray] = None
    truth_k: Optional[np.ndarray] = None
    noise_sigma: float = 0.0
    seed: int = 0
    extra_meta: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.signals.shape[0]

    def flat_signals(self) -> np.ndarray:
        """(H*W, n) signal matrix in raster order, re-normalized to unit
        norm (guards the float32 quantization of the archive payload)."""
        n = self.n_samples
        s = self.signals.reshape(n, -1).T.astype(float)
        nrm = np.linalg.norm(s, axis=1, keepdims=True)
        nrm[nrm == 0.0] = 1.0
        return s / nrm

    def flat_mask(self) -> np.ndarray:
        return self.mask.ravel().astype(bool)

    def aux_arrays(self, idx=None):
        """Engine-ready auxiliary arrays, optionally restricted to `idx`."""
        from .engine import AuxArrays
        flat = lambda a: a.ravel().astype(float)
        aux = AuxArrays(flat(self.t1_water), flat(self.t2_water),
                        flat(self.b0_shift), flat(self.b1_scale))
        fx = self.extra_meta.get("stage1_frozen")
        if fx is not None:
            aux.fixed_f = np.asarray(fx["f"], dtype=float).ravel()
            aux.fixed_k = np.asarray(fx["k"], dtype=float).ravel()
        return aux.take(idx) if idx is not None else aux


def write_archive(dataset: DatasetArchive, path) -> dict:
    """Serialize a dataset; returns the per-array checksum manifest."""
    meta = {"schedule": dataset.schedule_doc, "stage": dataset.stage,
            "shape": list(dataset.shape), "roi_names": dataset.roi_names,
            "noise_sigma": dataset.noise_sigma, "seed": dataset.seed,
            "units": {"f": "fraction", "k": "s^-1"},
            "extra": _jsonable(dataset.extra_meta)}
    f4 = lambda a: np.asarray(a, dtype=np.float32)
    arrays = {"signals": f4(dataset.signals),
              "t1_water": f4(dataset.t1_water), "t2_water": f4(dataset.t2_water),
              "b0_shift": f4(dataset.b0_shift), "b1_scale": f4(dataset.b1_scale),
              "mask": dataset.mask.astype(np.int32),
              "labels": dataset.labels.astype(np.int32)}
    if dataset.truth_f is not None:
        arrays["truth_f"] = f4(dataset.truth_f)
        arrays["truth_k"] = f4(dataset.truth_k)
    stage1 = dataset.extra_meta.get("stage1_frozen")
    if stage1 is not None:
        arrays["stage1_f"] = f4(stage1["f"])
        arrays["stage1_k"] = f4(stage1["k"])
    return write_container(path, "dataset", meta, arrays)


def read_archive(path) -> DatasetArchive:
    meta, arrays = read_container(path, expect_kind="dataset")
    extra = dict(meta.get("extra", {}))
    if "stage1_f" in arrays:
        extra["stage1_frozen"] = {"f": arrays["stage1_f"],
                                  "k": arrays["stage1_k"]}
    return DatasetArchive(
        schedule_doc=meta["schedule"], stage=meta["stage"],
        shape=tuple(meta["shape"]),
        signals=arrays["signals"].astype(float),
        t1_water=arrays["t1_water"].astype(float),
        t2_water=arrays["t2_water"].astype(float),
        b0_shift=arrays["b0_shift"].astype(float),
        b1_scale=arrays["b1_scale"].astype(float),
        mask=arrays["mask"], labels=arrays["labels"],
        roi_names=list(meta["roi_names"]),
        truth_f=arrays.get("truth_f"), truth_k=arrays.get("truth_k"),
        noise_sigma=meta["noise_sigma"], seed=meta["seed"],
        extra_meta=extra)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()
                if not isinstance(v, np.ndarray) and k != "stage1_frozen"}
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
