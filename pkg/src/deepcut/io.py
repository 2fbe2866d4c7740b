"""On-disk formats.

Volumes and label maps use a two-file container: ``name.hdr`` holds
``key = value`` lines (dims, spacing, dtype, byte_order, channels,
data_file) and ``name.raw`` the little-endian payload, x fastest, then y,
then z, then channel. Region sets are CSV rows
``slice_index,x0,y0,x1,y1,kind`` with kind ``B`` or ``H``.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .sampling import Box, RegionSet, Volume

_DTYPES = {"float32": "<f4", "uint8": "u1"}


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.name[:-4] if p.suffix in (".hdr", ".raw") else p.name
    return p.with_name(stem + ".hdr"), p.with_name(stem + ".raw")


def write_array(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0), dtype: str = "float32") -> Path:
    """Write a ``(nz, ny, nx)`` or ``(channels, nz, ny, nx)`` array."""
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype}")
    data = np.asarray(data)
    channels = 1 if data.ndim == 3 else data.shape[0]
    if data.ndim not in (3, 4):
        raise ValueError("expected a 3D volume or a 4D channel stack")
    nz, ny, nx = data.shape[-3:]
    hdr, raw = _paths(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"dims = {nx} {ny} {nz}",
             "spacing = " + " ".join(repr(float(s)) for s in spacing),
             f"dtype = {dtype}", "byte_order = little", f"channels = {channels}",
             f"data_file = {raw.name}"]
    hdr.write_text("\n".join(lines) + "\n")
    raw.write_bytes(np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes())
    return hdr


def read_header(path) -> dict[str, str]:
    hdr, _ = _paths(path)
    out = {}
    for line in hdr.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def read_array(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    hdr_path, raw_default = _paths(path)
    header = read_header(path)
    nx, ny, nz = (int(v) for v in header["dims"].split())
    spacing = tuple(float(v) for v in header.get("spacing", "1 1 1").split())
    dtype = header.get("dtype", "float32")
    if header.get("byte_order", "little") != "little":
        raise ValueError("only little-endian payloads are supported")
    channels = int(header.get("channels", "1"))
    raw = hdr_path.parent / header.get("data_file", raw_default.name)
    data = np.fromfile(raw, dtype=_DTYPES[dtype])
    expected = channels * nz * ny * nx
    if data.size != expected:
        raise ValueError(f"{raw}: expected {expected} values, found {data.size}")
    shape = (nz, ny, nx) if channels == 1 else (channels, nz, ny, nx)
    return data.reshape(shape), spacing


def write_volume(path, volume: Volume) -> Path:
    return write_array(path, volume.data, volume.spacing, "float32")


def read_volume(path) -> Volume:
    data, spacing = read_array(path)
    if data.ndim != 3:
        raise ValueError("expected a single-channel volume")
    return Volume(data.astype(np.float32), spacing)


def write_labels(path, labels, spacing=(1.0, 1.0, 1.0)) -> Path:
    return write_array(path, np.asarray(labels, dtype=np.uint8), spacing, "uint8")


def read_labels(path) -> np.ndarray:
    data, _ = read_array(path)
    return data.astype(np.uint8)


def write_regions(path, regions: RegionSet, with_targets: bool = False) -> Path:
    """Boxes to CSV; optionally R_FG/R_BG to a sibling ``.targets`` label map
    (1 foreground target, 0 background target, 2 elsewhere)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice_index", "x0", "y0", "x1", "y1", "kind"])
        for kind, boxes in (("B", regions.boxes), ("H", regions.halo_boxes)):
            for z in sorted(boxes):
                w.writerow([z, *boxes[z], kind])
    if with_targets:
        targets = np.full(regions.shape, 2, dtype=np.uint8)
        targets[regions.bg] = 0
        targets[regions.fg] = 1
        write_labels(_targets_path(path), targets)
    return path


def _targets_path(path: Path) -> Path:
    return path.with_name(path.stem + ".targets.hdr")


def read_regions(path, shape) -> RegionSet:
    """Boxes from CSV; targets from the sibling map when present, else R_FG = B."""
    path = Path(path)
    boxes, halo = {}, {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            box = Box(int(row["x0"]), int(row["y0"]), int(row["x1"]), int(row["y1"]))
            kind = row["kind"].strip()
            if kind == "B":
                boxes[int(row["slice_index"])] = box
            elif kind == "H":
                halo[int(row["slice_index"])] = box
            else:
                raise ValueError(f"{path}: unknown region kind {kind!r}")
    regions = RegionSet(tuple(shape), boxes, halo)
    tp = _targets_path(path)
    if tp.exists():
        targets = read_labels(tp)
        regions = regions.with_targets(targets == 1, targets == 0)
    regions.check()
    return regions


def read_keyvalue(path) -> dict[str, str]:
    """Flat ``key = value`` file; blank lines and ``#`` comments ignored."""
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line and not line.startswith("["):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def write_corpus(directory, subjects) -> Path:
    """One volume, ground-truth label map and region CSV per subject, plus
    a ``subjects.txt`` index."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in subjects:
        write_volume(d / f"{s.ident}.hdr", s.volume)
        if s.truth is not None:
            write_labels(d / f"{s.ident}_truth.hdr", s.truth, s.volume.spacing)
        write_regions(d / f"{s.ident}_regions.csv", s.regions)
    (d / "subjects.txt").write_text("".join(f"{s.ident}\n" for s in subjects))
    return d


def read_corpus(directory):
    """Cases listed in ``subjects.txt``; ground truth is attached when present."""
    from .driver import Case

    d = Path(directory)
    cases = []
    for ident in (d / "subjects.txt").read_text().split():
        volume = read_volume(d / f"{ident}.hdr")
        regions = read_regions(d / f"{ident}_regions.csv", volume.shape)
        truth_path = d / f"{ident}_truth.hdr"
        truth = read_labels(truth_path) if truth_path.exists() else None
        cases.append(Case(ident, volume, regions, truth))
    return cases
