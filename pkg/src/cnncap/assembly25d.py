"""2.5-D crossover capacitance assembly from two perpendicular 2-D solves.

A crossover of wires m1 (width w1) and m2 (width w2) is approximated from
the two cross-section views: each view yields a left fringe, an overlap,
and a right fringe component between the wires (per unit length).  The
crossover capacitance is

    C = C_A * w1 + (C_B - overlap_B) * w2

where C_A and C_B are the component sums of the two views; the second
view's overlap is dropped because the overlap region is already counted
by the first term.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class CrossSectionCaps:
    fringe_left: float   # fF/µm
    overlap: float       # fF/µm
    fringe_right: float  # fF/µm

    def __post_init__(self):
        for name in ("fringe_left", "overlap", "fringe_right"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


def cross_section_total(c: CrossSectionCaps) -> float:
    """Per-unit-length coupling in one view: fringes plus overlap."""
    return c.fringe_left + c.overlap + c.fringe_right


def assemble_crossover(caps_a: CrossSectionCaps, caps_b: CrossSectionCaps,
                       w1: float, w2: float) -> float:
    """Crossover capacitance in fF from the two views and the wire widths (µm)."""
    if w1 <= 0 or w2 <= 0:
        raise ValueError(f"wire widths must be positive, got w1={w1}, w2={w2}")
    c_a = cross_section_total(caps_a)
    c_b = cross_section_total(caps_b)
    return c_a * w1 + (c_b - caps_b.overlap) * w2
