"""Random design-rule-clean 2-D cross-section structures.

Three pattern families over a (bottom, middle, top) metal layer triple:

* Pattern-A: "sandwich" -- full-window planes on the bottom and top layers,
  master plus one symmetric neighbor pair on the middle layer.
* Pattern-B: fixed 1/3/1 conductor counts plus the substrate ground plane.
* Pattern-C: 3 conductors on the middle layer, a variable number (6..8
  combined) on the top and bottom layers, plus the substrate ground.

The master conductor always has id 0 and is horizontally centered on the
middle layer.  All geometry is in µm.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .techmodel import TechFile, window_width

# Width/spacing sampling: value = minimum * (1 + E) with E exponential.
# Exponential skew gives "small with larger probability"; widths are
# capped so no wire exceeds 10x the minimum width.
_WIDTH_EXCESS_MEAN = 1.5
_WIDTH_EXCESS_CAP = 9.0
_SPACING_EXCESS_MEAN = 2.0
_MAX_RETRIES = 100

_GEOM_TOL = 1e-9


class GenerationError(RuntimeError):
    """Raised when a structure cannot be placed within the retry budget."""


@dataclass(frozen=True)
class Conductor:
    id: int        # 0 = master
    layer: int
    x_left: float  # µm
    width: float   # µm

    @property
    def x_right(self) -> float:
        return self.x_left + self.width


@dataclass(frozen=True)
class Structure2D:
    id: str
    pattern: str                      # "A", "B" or "C"
    layer_triple: tuple[int, int, int]  # (bottom, middle, top)
    window_width: float
    conductors: tuple[Conductor, ...]
    has_substrate_ground: bool

    @property
    def master(self) -> Conductor:
        for c in self.conductors:
            if c.id == 0:
                return c
        raise ValueError(f"structure {self.id} has no master conductor")

    def on_layer(self, layer: int) -> list[Conductor]:
        return [c for c in self.conductors if c.layer == layer]

    @property
    def n_c(self) -> int:
        return len(self.conductors)


@dataclass(frozen=True)
class Violation:
    rule: str
    conductor_ids: tuple[int, ...]
    measured: float
    required: float

    def __str__(self) -> str:
        ids = ",".join(str(i) for i in self.conductor_ids)
        return f"{self.rule}[{ids}]: measured {self.measured:g}, required {self.required:g}"


def _sample_width(rng: np.random.Generator, w_min: float) -> float:
    excess = rng.exponential(_WIDTH_EXCESS_MEAN)
    while excess > _WIDTH_EXCESS_CAP:
        excess = rng.exponential(_WIDTH_EXCESS_MEAN)
    return w_min * (1.0 + excess)


def _sample_spacing(rng: np.random.Generator, s_min: float, cap: float) -> float:
    excess = rng.exponential(_SPACING_EXCESS_MEAN)
    spacing = s_min * (1.0 + excess)
    return min(spacing, cap) if cap > s_min else s_min


def generate_pattern_a(tech: TechFile, layer_triple: tuple[int, int, int],
                       rng_seed: int, structure_id: str | None = None) -> Structure2D:
    """Sandwich structure: planes on the outer layers, 3 wires in between."""
    bottom, middle, top = layer_triple
    mid = tech.layer(middle)
    width = window_width(tech, middle)
    rng = np.random.default_rng(rng_seed)

    for _ in range(_MAX_RETRIES):
        w1 = _sample_width(rng, mid.w_min)
        w2 = _sample_width(rng, mid.w_min)
        s = _sample_spacing(rng, mid.s_min, width)
        if w1 + 2 * (s + w2) > width:
            continue
        master_x = (width - w1) / 2
        conductors = (
            Conductor(id=0, layer=middle, x_left=master_x, width=w1),
            Conductor(id=1, layer=bottom, x_left=0.0, width=width),
            Conductor(id=2, layer=top, x_left=0.0, width=width),
            Conductor(id=3, layer=middle, x_left=master_x - s - w2, width=w2),
            Conductor(id=4, layer=middle, x_left=master_x + w1 + s, width=w2),
        )
        return Structure2D(
            id=structure_id or f"A-{rng_seed}", pattern="A",
            layer_triple=layer_triple, window_width=width,
            conductors=conductors, has_substrate_ground=False)
    raise GenerationError(f"pattern A: no fit in window after {_MAX_RETRIES} tries")


def _place_middle_triplet(rng: np.random.Generator, layer_spec, width: float,
                          middle: int) -> tuple[Conductor, ...] | None:
    """Master + one neighbor each side on the middle layer, or None on overflow."""
    w1 = _sample_width(rng, layer_spec.w_min)
    w_left = _sample_width(rng, layer_spec.w_min)
    w_right = _sample_width(rng, layer_spec.w_min)
    s_left = _sample_spacing(rng, layer_spec.s_min, width)
    s_right = _sample_spacing(rng, layer_spec.s_min, width)
    master_x = (width - w1) / 2
    left_x = master_x - s_left - w_left
    right_x = master_x + w1 + s_right
    if left_x < 0 or right_x + w_right > width:
        return None
    return (
        Conductor(id=0, layer=middle, x_left=master_x, width=w1),
        Conductor(id=1, layer=middle, x_left=left_x, width=w_left),
        Conductor(id=2, layer=middle, x_left=right_x, width=w_right),
    )


def generate_pattern_b(tech: TechFile, layer_triple: tuple[int, int, int],
                       rng_seed: int, structure_id: str | None = None) -> Structure2D:
    """1/3/1 conductors on (bottom, middle, top) plus substrate ground."""
    bottom, middle, top = layer_triple
    mid = tech.layer(middle)
    width = window_width(tech, middle)
    rng = np.random.default_rng(rng_seed)

    for _ in range(_MAX_RETRIES):
        triplet = _place_middle_triplet(rng, mid, width, middle)
        if triplet is None:
            continue
        singles = []
        ok = True
        for cid, layer in ((3, bottom), (4, top)):
            w = _sample_width(rng, tech.layer(layer).w_min)
            if w > width:
                ok = False
                break
            x = rng.uniform(0.0, width - w)
            singles.append(Conductor(id=cid, layer=layer, x_left=x, width=w))
        if not ok:
            continue
        return Structure2D(
            id=structure_id or f"B-{rng_seed}", pattern="B",
            layer_triple=layer_triple, window_width=width,
            conductors=triplet + tuple(singles), has_substrate_ground=True)
    raise GenerationError(f"pattern B: no fit in window after {_MAX_RETRIES} tries")


def _place_row(rng: np.random.Generator, layer_spec, width: float, layer: int,
               count: int, first_id: int) -> list[Conductor] | None:
    """Place `count` wires left-to-right from a random offset, or None on overflow."""
    conductors = []
    x = rng.uniform(0.0, width / 2)
    for k in range(count):
        if k > 0:
            x += _sample_spacing(rng, layer_spec.s_min, width)
        w = _sample_width(rng, layer_spec.w_min)
        if x + w > width:
            return None
        conductors.append(Conductor(id=first_id + k, layer=layer, x_left=x, width=w))
        x += w
    return conductors


def generate_pattern_c(tech: TechFile, layer_triple: tuple[int, int, int],
                       rng_seed: int, structure_id: str | None = None) -> Structure2D:
    """Variable-conductor pattern: 6..8 wires combined on the outer layers."""
    bottom, middle, top = layer_triple
    mid = tech.layer(middle)
    width = window_width(tech, middle)
    rng = np.random.default_rng(rng_seed)

    for _ in range(_MAX_RETRIES):
        triplet = _place_middle_triplet(rng, mid, width, middle)
        if triplet is None:
            continue
        total = int(rng.integers(6, 9))
        n_top = int(rng.integers(1, total))   # both layers get >= 1
        n_bottom = total - n_top
        bottom_row = _place_row(rng, tech.layer(bottom), width, bottom, n_bottom, 3)
        if bottom_row is None:
            continue
        top_row = _place_row(rng, tech.layer(top), width, top, n_top, 3 + n_bottom)
        if top_row is None:
            continue
        return Structure2D(
            id=structure_id or f"C-{rng_seed}", pattern="C",
            layer_triple=layer_triple, window_width=width,
            conductors=triplet + tuple(bottom_row) + tuple(top_row),
            has_substrate_ground=True)
    raise GenerationError(f"pattern C: no fit in window after {_MAX_RETRIES} tries")


def generate(tech: TechFile, pattern: str, layer_triple: tuple[int, int, int],
             rng_seed: int, structure_id: str | None = None) -> Structure2D:
    gen = {"A": generate_pattern_a, "B": generate_pattern_b, "C": generate_pattern_c}
    if pattern not in gen:
        raise ValueError(f"unknown pattern kind '{pattern}'")
    return gen[pattern](tech, layer_triple, rng_seed, structure_id)


def validate_structure(tech: TechFile, s: Structure2D) -> list[Violation]:
    """All design-rule and structural checks.  Empty list means clean."""
    violations = []
    masters = [c for c in s.conductors if c.id == 0]
    middle = s.layer_triple[1]
    if len(masters) != 1:
        violations.append(Violation("master-count", tuple(c.id for c in masters),
                                    len(masters), 1))
        return violations
    master = masters[0]
    if master.layer != middle:
        violations.append(Violation("master-layer", (0,), master.layer, middle))
    centered_x = (s.window_width - master.width) / 2
    if abs(master.x_left - centered_x) > _GEOM_TOL:
        violations.append(Violation("master-centering", (0,), master.x_left, centered_x))

    for c in s.conductors:
        if c.layer not in s.layer_triple:
            violations.append(Violation("layer-membership", (c.id,), c.layer, -1))
            continue
        w_min = tech.layer(c.layer).w_min
        if c.width < w_min - _GEOM_TOL:
            violations.append(Violation("min-width", (c.id,), c.width, w_min))
        if c.x_left < -_GEOM_TOL or c.x_right > s.window_width + _GEOM_TOL:
            violations.append(Violation("window-bounds", (c.id,), c.x_left, 0.0))

    for layer in set(c.layer for c in s.conductors):
        row = sorted(s.on_layer(layer), key=lambda c: c.x_left)
        s_min = tech.layer(layer).s_min if layer in {l.index for l in tech.layers} else 0.0
        for a, b in zip(row, row[1:]):
            gap = b.x_left - a.x_right
            if gap < s_min - _GEOM_TOL:
                violations.append(Violation("min-spacing", (a.id, b.id), gap, s_min))
    return violations


# --- text serialization ------------------------------------------------
# One structure per line:
#   id pattern layers=(k,j,i) W=<µm> ground=<0|1> cond=(id,layer,x,w);...

def structure_to_line(s: Structure2D) -> str:
    k, j, i = s.layer_triple
    conds = ";".join(
        f"({c.id},{c.layer},{float(c.x_left)!r},{float(c.width)!r})" for c in s.conductors)
    return (f"{s.id} {s.pattern} layers=({k},{j},{i}) W={float(s.window_width)!r} "
            f"ground={1 if s.has_substrate_ground else 0} cond={conds}")


def structure_from_line(line: str) -> Structure2D:
    try:
        sid, pattern, layers_tok, w_tok, ground_tok, cond_tok = line.strip().split(" ", 5)
        k, j, i = (int(v) for v in layers_tok[len("layers=("):-1].split(","))
        width = float(w_tok[len("W="):])
        ground = ground_tok[len("ground="):] == "1"
        conductors = []
        for item in cond_tok[len("cond="):].split(";"):
            cid, layer, x, w = item.strip("()").split(",")
            conductors.append(Conductor(id=int(cid), layer=int(layer),
                                        x_left=float(x), width=float(w)))
    except (ValueError, IndexError) as exc:
        raise ValueError(f"bad structure record: {line!r}") from exc
    return Structure2D(id=sid, pattern=pattern, layer_triple=(k, j, i),
                       window_width=width, conductors=tuple(conductors),
                       has_substrate_ground=ground)


def save_structures(structures: list[Structure2D], path: str | Path,
                    header: str | None = None) -> None:
    lines = []
    if header:
        lines.append(f"# {header}")
    lines.extend(structure_to_line(s) for s in structures)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_structures(path: str | Path) -> list[Structure2D]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        out.append(structure_from_line(line))
    return out


def mirror_x(s: Structure2D) -> Structure2D:
    """Reflect the structure about the window's vertical center line."""
    mirrored = tuple(
        replace(c, x_left=s.window_width - c.x_right) for c in s.conductors)
    return replace(s, conductors=mirrored)
