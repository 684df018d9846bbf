"""Precompute the default spread sphere configurations shipped as package data."""

import numpy as np

from geoprofile.repsampler import POINTS_PER_CONTOUR, bundled_sphere_path, sphere_points

if __name__ == "__main__":
    for dim, n in POINTS_PER_CONTOUR.items():
        pts = sphere_points(dim, n, use_bundled=False)
        np.save(bundled_sphere_path(dim, n), pts)
        print(dim, n, bundled_sphere_path(dim, n))
