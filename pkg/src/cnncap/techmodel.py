"""Process technology description: metal layers, dielectric stack, window sizing.

A technology is described by a small line-oriented text file (see
``load_techfile``).  All lengths are micrometers.  The substrate ground
plane sits at z = 0 and the dielectric slabs tile [0, z_max] exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

# Multiple of the master layer's minimum width used for the extraction
# window span.
WINDOW_WIDTH_FACTOR = 56

_TILE_TOL = 1e-9


class TechFileError(ValueError):
    """Raised for unparsable or physically inconsistent tech files."""


@dataclass(frozen=True)
class MetalLayerSpec:
    index: int          # 1-based layer index
    thickness: float    # µm
    w_min: float        # µm, minimum wire width
    s_min: float        # µm, minimum same-layer spacing
    z_bottom: float     # µm above the substrate plane

    @property
    def z_top(self) -> float:
        return self.z_bottom + self.thickness


@dataclass(frozen=True)
class DielectricSlab:
    z_bottom: float
    z_top: float
    eps_r: float


@dataclass(frozen=True)
class TechFile:
    name: str
    layers: tuple[MetalLayerSpec, ...]
    dielectrics: tuple[DielectricSlab, ...]

    @property
    def z_max(self) -> float:
        return self.dielectrics[-1].z_top

    def layer(self, index: int) -> MetalLayerSpec:
        for layer in self.layers:
            if layer.index == index:
                return layer
        raise TechFileError(f"unknown metal layer index {index} in tech '{self.name}'")


def _validate(tech: TechFile) -> TechFile:
    if not tech.layers:
        raise TechFileError("tech file defines no metal layers")
    if not tech.dielectrics:
        raise TechFileError("tech file defines no dielectric slabs")

    for layer in tech.layers:
        if layer.thickness <= 0 or layer.w_min <= 0 or layer.s_min <= 0:
            raise TechFileError(f"layer {layer.index}: nonpositive geometry parameter")
        if layer.z_bottom < 0:
            raise TechFileError(f"layer {layer.index}: z_bottom below substrate plane")

    by_index = sorted(tech.layers, key=lambda l: l.index)
    indices = [l.index for l in by_index]
    if len(set(indices)) != len(indices):
        raise TechFileError("duplicate metal layer index")
    for lo, hi in zip(by_index, by_index[1:]):
        if hi.z_bottom <= lo.z_bottom:
            raise TechFileError(
                f"layer {hi.index}: z_bottom must increase with layer index")
        if hi.z_bottom < lo.z_top - _TILE_TOL:
            raise TechFileError(
                f"layer {hi.index}: vertical overlap with layer {lo.index}")

    slabs = tech.dielectrics
    for slab in slabs:
        if slab.z_top <= slab.z_bottom:
            raise TechFileError(f"dielectric [{slab.z_bottom},{slab.z_top}]: empty extent")
        if slab.eps_r < 1.0:
            raise TechFileError(f"dielectric [{slab.z_bottom},{slab.z_top}]: eps_r < 1")
    ordered = sorted(slabs, key=lambda s: s.z_bottom)
    if abs(ordered[0].z_bottom) > _TILE_TOL:
        raise TechFileError("dielectric gap: stack does not start at z=0")
    for lo, hi in zip(ordered, ordered[1:]):
        if hi.z_bottom < lo.z_top - _TILE_TOL:
            raise TechFileError(
                f"dielectric overlap at z={hi.z_bottom:g} "
                f"(slabs [{lo.z_bottom:g},{lo.z_top:g}] and [{hi.z_bottom:g},{hi.z_top:g}])")
        if hi.z_bottom > lo.z_top + _TILE_TOL:
            raise TechFileError(f"dielectric gap between z={lo.z_top:g} and z={hi.z_bottom:g}")

    z_max = ordered[-1].z_top
    for layer in tech.layers:
        if layer.z_bottom < -_TILE_TOL or layer.z_top > z_max + _TILE_TOL:
            raise TechFileError(
                f"layer {layer.index}: extent [{layer.z_bottom:g},{layer.z_top:g}] "
                f"outside dielectric stack [0,{z_max:g}]")
    return tech


def _parse_kv(tokens: list[str], lineno: int) -> dict[str, float]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise TechFileError(f"line {lineno}: expected key=value, got '{tok}'")
        key, _, val = tok.partition("=")
        try:
            out[key] = float(val)
        except ValueError:
            raise TechFileError(f"line {lineno}: bad number '{val}' for '{key}'") from None
    return out


def load_techfile(path: str | Path) -> TechFile:
    """Parse a tech file.

    Format (one statement per line, '#' starts a comment)::

        tech <name>
        layer <index> zbottom=<µm> thickness=<µm> wmin=<µm> smin=<µm>
        dielectric zbottom=<µm> ztop=<µm> epsr=<float>
    """
    name = None
    layers: list[MetalLayerSpec] = []
    slabs: list[DielectricSlab] = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        kind = tokens[0]
        if kind == "tech":
            if len(tokens) != 2:
                raise TechFileError(f"line {lineno}: 'tech' takes exactly one name")
            name = tokens[1]
        elif kind == "layer":
            if len(tokens) != 6:
                raise TechFileError(f"line {lineno}: 'layer' takes index + 4 key=value fields")
            try:
                index = int(tokens[1])
            except ValueError:
                raise TechFileError(f"line {lineno}: bad layer index '{tokens[1]}'") from None
            kv = _parse_kv(tokens[2:], lineno)
            missing = {"zbottom", "thickness", "wmin", "smin"} - kv.keys()
            if missing:
                raise TechFileError(f"line {lineno}: missing {sorted(missing)}")
            layers.append(MetalLayerSpec(
                index=index, thickness=kv["thickness"], w_min=kv["wmin"],
                s_min=kv["smin"], z_bottom=kv["zbottom"]))
        elif kind == "dielectric":
            kv = _parse_kv(tokens[1:], lineno)
            missing = {"zbottom", "ztop", "epsr"} - kv.keys()
            if missing:
                raise TechFileError(f"line {lineno}: missing {sorted(missing)}")
            slabs.append(DielectricSlab(
                z_bottom=kv["zbottom"], z_top=kv["ztop"], eps_r=kv["epsr"]))
        else:
            raise TechFileError(f"line {lineno}: unknown statement '{kind}'")
    if name is None:
        raise TechFileError("missing 'tech <name>' statement")
    return _validate(TechFile(
        name=name,
        layers=tuple(sorted(layers, key=lambda l: l.index)),
        dielectrics=tuple(sorted(slabs, key=lambda s: s.z_bottom)),
    ))


def save_techfile(tech: TechFile, path: str | Path) -> None:
    """Write a tech file that reloads to an identical TechFile (round-trip safe)."""
    lines = [f"tech {tech.name}"]
    for l in tech.layers:
        lines.append(
            f"layer {l.index} zbottom={l.z_bottom!r} thickness={l.thickness!r} "
            f"wmin={l.w_min!r} smin={l.s_min!r}")
    for s in tech.dielectrics:
        lines.append(f"dielectric zbottom={s.z_bottom!r} ztop={s.z_top!r} epsr={s.eps_r!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def bundled_tech_path(name: str) -> Path:
    """Path to a tech file shipped with the package ('tech55' or 'tech15')."""
    path = Path(__file__).parent / "data" / f"{name}.tech"
    if not path.exists():
        raise TechFileError(f"no bundled tech file '{name}'")
    return path


def window_width(tech: TechFile, master_layer: int) -> float:
    """Extraction window span: 56x the master layer's minimum width."""
    return WINDOW_WIDTH_FACTOR * tech.layer(master_layer).w_min


def calibrate_window(tech: TechFile, master_layer: int, solver_handle=None,
                     ratio: float = 0.01, max_multiple: int = 64) -> float:
    """Audit the fixed window width.

    Finds the smallest half-width k*w_min (integer k) at which a lone
    same-layer neighbor's coupling to the master drops below `ratio` of the
    master's total capacitance.  Monotone bisection over the center-to-center
    distance.  Returns the half-width in µm.

    `solver_handle` is a callable (tech, structure) -> CapacitanceResult;
    defaults to the built-in FDM solver.
    """
    from . import fieldsolver, patgen

    if solver_handle is None:
        def solver_handle(t, s):
            return fieldsolver.extract_capacitances(t, s)

    layer = tech.layer(master_layer)
    w = layer.w_min

    def ratio_at(k: int) -> float:
        # Master centered, neighbor center at k*w_min to the right; window
        # wide enough that the side wall stays away from the neighbor.
        width = 2 * (k + 4) * w
        master_x = width / 2 - w / 2
        neighbor_x = master_x + k * w
        structure = patgen.Structure2D(
            id=f"calib-{tech.name}-L{master_layer}-k{k}",
            pattern="B",
            layer_triple=(master_layer, master_layer, master_layer),
            window_width=width,
            conductors=(
                patgen.Conductor(id=0, layer=master_layer, x_left=master_x, width=w),
                patgen.Conductor(id=1, layer=master_layer, x_left=neighbor_x, width=w),
            ),
            has_substrate_ground=True,
        )
        result = solver_handle(tech, structure)
        return result.couplings[1] / result.total

    # smallest design-rule-clean center-to-center multiple: gap (k-1)*w >= s_min
    lo = max(2, math.ceil(1 + layer.s_min / w - 1e-12))
    hi = max_multiple
    if ratio_at(hi) > ratio:
        raise TechFileError(
            f"coupling ratio still above {ratio:.2%} at {hi}x w_min; "
            f"increase max_multiple")
    if ratio_at(lo) <= ratio:
        return lo * w
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ratio_at(mid) <= ratio:
            hi = mid
        else:
            lo = mid
    return hi * w
