"""Sampling the field and conditioning on the outside of a region.

A sample is drawn by solving Δ²_N φ = Bᵀz for white noise z.  Given the field
outside a cube A, the conditional mean inside only depends on the two layers
around A.  The multiscale box hierarchy and the concentration of the box
observables are computed exactly from the same linear algebra.
"""

from __future__ import annotations

import numpy as np

from membrane_lab.gaussfield import (
    build_hierarchy,
    concentration_check,
    conditional_mean,
    sample_field,
    scale_variance,
)
from membrane_lab.lattice import build_box


def main() -> None:
    box = build_box(6, 4)
    phi = sample_field(box, seed=1)
    print(f"sample on {box.n_sites} sites: max {phi.values.max():.3f}, φ(0) = {phi.at((0, 0, 0, 0)):.3f}")

    A = box.block_mask((0, 0, 0, 0), 2)
    m = conditional_mean(box, A, phi.values)
    print(f"conditional mean on the 5^4 cube at the centre: {m[len(m) // 2]:.3f}")

    h = build_hierarchy(build_box(16, 4), alpha=0.75, K=2)
    for lv in h.levels:
        print(f"level {lv.index}: side {lv.side}, {len(lv.boxes)} boxes, {len(lv.selected)} selected")

    big, small = h.levels[0], h.levels[1]
    c = small.selected[0]
    sv = scale_variance(build_box(16, 4), c, small.side, big.side)
    print(f"variance split of the side-{small.side} observable: {sv.outer:.4f} = {sv.inner:.4f} + {sv.observable:.4f}")

    print("\nconcentration of E(φ_x | ∂A_6) - E(φ_0 | ∂A_6) inside A_12:")
    for j in range(4):
        r = concentration_check(12, 6, (j, 0, 0, 0))
        print(f"  x = ({j},0,0,0): {r.value:.6f}")
    print(np.array2string(phi.values[:5], precision=3))


if __name__ == "__main__":
    main()
