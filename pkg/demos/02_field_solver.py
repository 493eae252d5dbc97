"""Extract a capacitance matrix with the finite-difference field solver.

The solver lays a nested nonuniform grid over the cross-section, solves the
multi-dielectric Laplace equation once per conductor, and integrates the
induced charge on every conductor to build the Maxwell capacitance matrix.
The master's total capacitance is its diagonal entry; couplings are the
negated off-diagonals.
"""

import numpy as np

from cnncap import fieldsolver, patgen, techmodel

tech = techmodel.load_techfile(techmodel.bundled_tech_path("tech55"))
s = patgen.generate_pattern_b(tech, (2, 3, 4), 1)

result = fieldsolver.extract_capacitances(tech, s, resolution=4)
print(f"structure {s.id}: {s.n_c} conductors, "
      f"solved in {result.solve_seconds:.2f} s "
      f"(grid {result.grid_shape}, residual {result.residual:.1e})")
print(f"total (master):   {result.total:.4f} fF/µm")
for env, c in sorted(result.couplings.items()):
    print(f"coupling to {env}:    {c:.4f} fF/µm")
print(f"coupling to ground: {result.ground_coupling:.4f} fF/µm")

m = result.maxwell
print(f"\nreciprocity |C - C^T|/|C| = "
      f"{np.max(np.abs(m - m.T)) / np.max(np.abs(m)):.1e}")
recon = sum(result.couplings.values()) + result.ground_coupling
print(f"total vs sum of couplings: {result.total:.4f} vs {recon:.4f}")

print("\ngrid convergence (total capacitance):")
for r in (2, 4, 8):
    total = fieldsolver.extract_capacitances(tech, s, resolution=r).total
    print(f"  resolution {r}: {total:.5f} fF/µm")
