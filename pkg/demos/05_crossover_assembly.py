"""Assemble a 3-D crossover capacitance from two 2-D cross-section views.

Where two perpendicular wires cross, each cross-section view splits the
coupling (per unit length) into a left fringe, an overlap, and a right
fringe. The crossover capacitance multiplies each view's coupling by the
other wire's width, counting the shared overlap region only once:

    C = (f1 + o + f2)_A * w1 + (f1 + f2)_B * w2
"""

from cnncap.assembly25d import (CrossSectionCaps, assemble_crossover,
                                cross_section_total)

# per-unit-length components from the two perpendicular solves (fF/µm)
view_a = CrossSectionCaps(fringe_left=0.012, overlap=0.173, fringe_right=0.012)
view_b = CrossSectionCaps(fringe_left=0.015, overlap=0.171, fringe_right=0.015)
w1, w2 = 0.10, 0.14  # wire widths in µm

print(f"view A total: {cross_section_total(view_a):.4f} fF/µm")
print(f"view B total: {cross_section_total(view_b):.4f} fF/µm")
c = assemble_crossover(view_a, view_b, w1, w2)
print(f"crossover capacitance: {c * 1e3:.4f} aF "
      f"(w1={w1} µm, w2={w2} µm)")

# the assembly is exactly linear in each width
for scale in (1.0, 2.0):
    print(f"w1 x{scale}: {assemble_crossover(view_a, view_b, scale * w1, w2):.6f} fF")
