"""Grid-density encoding of cross-section structures into training samples.

The window is divided into L equal cells; each of the three metal layers
contributes one row of per-cell conductor coverage fractions (the density
map).  Task-specific feature vectors mark the master (+1 on its cells of
the middle row) and, for a coupling task, negate the density on the cells
of the chosen environmental conductor.  One structure expands into one
total-capacitance sample plus one sample per environmental conductor whose
coupling survives the small-capacitance filter.

Channel order is fixed: row 0 = bottom layer, row 1 = middle, row 2 = top.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .patgen import Conductor, Structure2D

TASK_TOTAL = "total"
TASK_COUPLING = "coupling"

_MAGIC = b"CCAP"
_VERSION = 1
_CHANNEL_TAG = b"bottom-middle-top".ljust(24, b"\0")
_COVER_TOL = 1e-12


class EncodingError(ValueError):
    pass


@dataclass
class DensityMap:
    L: int
    channels: np.ndarray  # (3, L), coverage fractions in [0, 1]


@dataclass
class FeatureVector:
    L: int
    values: np.ndarray    # (3, L)
    task: str             # TASK_TOTAL or TASK_COUPLING
    env_id: int | None = None


@dataclass
class GridSample:
    feature: FeatureVector
    target: float         # fF/µm
    structure_id: str
    env_id: int | None = None


def _coverage(conductors: list[Conductor], width: float, L: int) -> np.ndarray:
    """Exact per-cell covered fraction for one layer row."""
    cell = width / L
    edges = np.arange(L + 1) * cell
    cov = np.zeros(L)
    for c in conductors:
        lo = np.clip(c.x_left, edges[:-1], edges[1:])
        hi = np.clip(c.x_right, edges[:-1], edges[1:])
        cov += (hi - lo) / cell
    # guard against float rounding pushing a fully covered cell above 1
    return np.clip(cov, 0.0, 1.0)


def density_map(structure: Structure2D, L: int, tech=None) -> DensityMap:
    """Density map over the fixed (bottom, middle, top) channel order.

    The cell size W/L must be smaller than the minimum spacing of every
    layer in the triple, otherwise the encoding is ambiguous; the check
    needs design rules, so it runs only when `tech` is passed (see
    `check_cell_size`).
    """
    if tech is not None:
        check_cell_size(tech, structure, L)
    channels = np.stack([
        _coverage(structure.on_layer(layer), structure.window_width, L)
        for layer in structure.layer_triple
    ])
    return DensityMap(L=L, channels=channels)


def check_cell_size(tech, structure: Structure2D, L: int) -> None:
    """Reject cell sizes >= the minimum spacing of any layer in the triple."""
    cell = structure.window_width / L
    for layer in structure.layer_triple:
        s_min = tech.layer(layer).s_min
        if cell >= s_min:
            raise EncodingError(
                f"cell size {cell:g} >= s_min {s_min:g} on layer {layer}; "
                f"increase L")


def _master_mask(structure: Structure2D, L: int) -> np.ndarray:
    return _coverage([structure.master], structure.window_width, L) > _COVER_TOL


def total_feature(dmap: DensityMap, structure: Structure2D) -> FeatureVector:
    """Density map with +1 added on the middle-row cells touched by the master."""
    values = dmap.channels.copy()
    values[1, _master_mask(structure, dmap.L)] += 1.0
    return FeatureVector(L=dmap.L, values=values, task=TASK_TOTAL)


def coupling_feature(dmap: DensityMap, structure: Structure2D,
                     env_id: int) -> FeatureVector:
    """Total-style feature with the environmental conductor's cells negated
    on its own layer row."""
    if env_id == 0:
        raise EncodingError("env_id 0 is the master, not an environmental conductor")
    if env_id < 0:
        raise EncodingError("ground not encodable")
    env = [c for c in structure.conductors if c.id == env_id]
    if not env:
        raise EncodingError(f"structure {structure.id} has no conductor {env_id}")
    feature = total_feature(dmap, structure)
    values = feature.values
    try:
        row = structure.layer_triple.index(env[0].layer)
    except ValueError:
        raise EncodingError(
            f"conductor {env_id} lies outside the layer triple") from None
    env_mask = _coverage(env, structure.window_width, dmap.L) > _COVER_TOL
    values[row, env_mask] = -dmap.channels[row, env_mask]
    return FeatureVector(L=dmap.L, values=values, task=TASK_COUPLING, env_id=env_id)


def expand_sample(structure: Structure2D, label, L: int,
                  filter_ratio: float = 0.01) -> list[GridSample]:
    """One TOTAL sample plus one COUPLING sample per environmental metal
    conductor whose coupling is at least `filter_ratio` of the total.

    `label` is a fieldsolver.CapacitanceResult or an equivalent mapping
    {'total': x, 'couplings': {env_id: x}}.
    """
    if isinstance(label, dict):
        total, couplings = label.get("total"), label.get("couplings", {})
    else:
        total, couplings = label.total, label.couplings
    if total is None:
        raise EncodingError(f"structure {structure.id}: missing total label")
    env_ids = sorted(c.id for c in structure.conductors if c.id != 0)
    missing = [e for e in env_ids if e not in couplings]
    if missing:
        raise EncodingError(f"structure {structure.id}: missing coupling labels {missing}")

    dmap = density_map(structure, L)
    samples = [GridSample(feature=total_feature(dmap, structure),
                          target=float(total), structure_id=structure.id)]
    for env_id in env_ids:
        value = float(couplings[env_id])
        if value < filter_ratio * total:
            continue
        samples.append(GridSample(
            feature=coupling_feature(dmap, structure, env_id),
            target=value, structure_id=structure.id, env_id=env_id))
    return samples


def mlp_feature_pattern_b(structure: Structure2D) -> np.ndarray:
    """9-parameter Pattern-B description: (w1..w5, x2..x5) in µm.

    Conductor order: master, middle-left, middle-right, bottom, top
    (ids 0..4).  The master's x is implied by centering and omitted.
    """
    if structure.pattern != "B":
        raise EncodingError(
            f"structure {structure.id} is pattern {structure.pattern}, expected B")
    by_id = {c.id: c for c in structure.conductors}
    if sorted(by_id) != [0, 1, 2, 3, 4]:
        raise EncodingError(
            f"pattern B expects conductor ids 0..4, got {sorted(by_id)}")
    widths = [by_id[i].width for i in range(5)]
    xs = [by_id[i].x_left for i in range(1, 5)]
    return np.array(widths + xs, dtype=float)


def structure_from_pattern_b_features(features: np.ndarray, layer_triple,
                                      window_width: float,
                                      structure_id: str = "rebuilt") -> Structure2D:
    """Inverse of `mlp_feature_pattern_b` (given the layers and window)."""
    w1, w2, w3, w4, w5 = features[:5]
    x2, x3, x4, x5 = features[5:]
    bottom, middle, top = layer_triple
    conductors = (
        Conductor(id=0, layer=middle, x_left=(window_width - w1) / 2, width=w1),
        Conductor(id=1, layer=middle, x_left=x2, width=w2),
        Conductor(id=2, layer=middle, x_left=x3, width=w3),
        Conductor(id=3, layer=bottom, x_left=x4, width=w4),
        Conductor(id=4, layer=top, x_left=x5, width=w5),
    )
    return Structure2D(id=structure_id, pattern="B", layer_triple=tuple(layer_triple),
                       window_width=window_width, conductors=conductors,
                       has_substrate_ground=True)


def reconstruct_intervals(density: np.ndarray, width: float) -> list[tuple[float, float]]:
    """Invert one density row back to conductor intervals.

    Valid when the cell size is below half the minimum spacing (runs of
    nonzero cells then map one-to-one to conductors) and below half the
    minimum width (interval ends are recoverable from the partial cells).
    """
    L = len(density)
    cell = width / L
    intervals = []
    i = 0
    while i < L:
        if density[i] <= _COVER_TOL:
            i += 1
            continue
        j = i
        while j + 1 < L and density[j + 1] > _COVER_TOL:
            j += 1
        start = i * cell + (1.0 - density[i]) * cell
        end = j * cell + density[j] * cell
        intervals.append((start, end))
        i = j + 1
    return intervals


# --- binary dataset ----------------------------------------------------
# Little-endian.  Header: magic "CCAP", version u32, L u32, count u64,
# 24-byte channel-order tag.  Record: structure index u32 (into the id
# table appended after the records), task u8, env_id i32, target f64,
# 3*L features f32.  Footer: id count u32, then NUL-separated utf-8 ids.

@dataclass
class EncodedDataset:
    L: int
    samples: list[GridSample]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            h.update(s.structure_id.encode())
            h.update(struct.pack("<Bid", s.feature.task == TASK_COUPLING,
                                 -1 if s.env_id is None else s.env_id, s.target))
            h.update(s.feature.values.astype("<f4").tobytes())
        return h.hexdigest()


def save_dataset(dataset: EncodedDataset, path: str | Path) -> None:
    ids: list[str] = []
    index: dict[str, int] = {}
    body = bytearray()
    for s in dataset.samples:
        if s.structure_id not in index:
            index[s.structure_id] = len(ids)
            ids.append(s.structure_id)
        task = 0 if s.feature.task == TASK_TOTAL else 1
        body += struct.pack("<IBid", index[s.structure_id], task,
                            -1 if s.env_id is None else s.env_id, s.target)
        body += s.feature.values.astype("<f4").tobytes()
    header = _MAGIC + struct.pack("<IIQ", _VERSION, dataset.L, len(dataset.samples))
    header += _CHANNEL_TAG
    footer = struct.pack("<I", len(ids)) + b"\0".join(i.encode() for i in ids)
    Path(path).write_bytes(bytes(header) + bytes(body) + footer)


def load_dataset(path: str | Path) -> EncodedDataset:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise EncodingError(f"{path}: not a CCAP dataset (bad magic)")
    version, L, count = struct.unpack_from("<IIQ", blob, 4)
    if version != _VERSION:
        raise EncodingError(f"{path}: unsupported dataset version {version}")
    tag = blob[20:44]
    if tag != _CHANNEL_TAG:
        raise EncodingError(f"{path}: unexpected channel-order tag {tag!r}")
    offset = 44
    rec_head = struct.Struct("<IBid")
    feat_bytes = 3 * L * 4
    records = []
    for _ in range(count):
        sidx, task, env_id, target = rec_head.unpack_from(blob, offset)
        offset += rec_head.size
        values = np.frombuffer(blob, dtype="<f4", count=3 * L,
                               offset=offset).reshape(3, L).astype(np.float32)
        offset += feat_bytes
        records.append((sidx, task, env_id, target, values))
    (n_ids,) = struct.unpack_from("<I", blob, offset)
    ids = blob[offset + 4:].split(b"\0")
    if len(ids) != n_ids:
        raise EncodingError(f"{path}: id table corrupt ({len(ids)} != {n_ids})")
    ids = [i.decode() for i in ids]
    samples = []
    for sidx, task, env_id, target, values in records:
        kind = TASK_TOTAL if task == 0 else TASK_COUPLING
        env = None if env_id < 0 else env_id
        samples.append(GridSample(
            feature=FeatureVector(L=L, values=values, task=kind, env_id=env),
            target=target, structure_id=ids[sidx], env_id=env))
    return EncodedDataset(L=L, samples=samples)


def encode_structures(tech, structures, labels: dict[str, dict], L: int,
                      filter_ratio: float = 0.01) -> EncodedDataset:
    """Expand solved structures into an encoded dataset (labels keyed by id)."""
    samples = []
    for s in structures:
        check_cell_size(tech, s, L)
        if s.id not in labels:
            raise EncodingError(f"no labels for structure {s.id}")
        samples.extend(expand_sample(s, labels[s.id], L, filter_ratio))
    return EncodedDataset(L=L, samples=samples)
