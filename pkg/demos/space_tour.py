"""Tour of the cell space: sizes, isomorphism classes and parameter slices.

Run with ``python demos/space_tour.py``.
"""

from collections import Counter

from archrobust import cellspace as cs

cells = cs.enumerate_space()
classes = cs.equivalence_classes()
print(f"{len(cells)} cells, {len(classes)} isomorphism classes")

# Class sizes: most cells are alone, a few classes are large.
sizes = Counter(len(m) for m in classes.values())
print("largest classes:", sorted(sizes.items())[-3:])

# A class with several members, shown by its strings.
rep = next(r for r, m in classes.items() if 3 <= len(m) <= 5)
print(f"\nclass {rep}:")
for m in classes[rep]:
    print("  ", m, cs.encode_arch_string(cs.cell_from_id(m)))

# Resolving any member gives the representative.
member = classes[rep][-1]
print(f"canonical_id({member}) = {cs.canonical_id(member)}")

# Kernel-parameter slices over the representatives.
kpc = Counter(cs.kernel_param_count(cs.cell_from_id(r)) for r in classes)
print("\nrepresentatives per kernel-parameter count:")
for k in sorted(kpc):
    print(f"  {k:2d}: {kpc[k]}")

# Single-edge edits of one cell, grouped by the class they land in.
cell = cs.cell_from_id(rep)
landing = Counter(cs.canonical_id(n) for n in cs.neighbors(cell))
print(f"\n{len(cs.neighbors(cell))} edits of class {rep} reach {len(landing)} classes")
