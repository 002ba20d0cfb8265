"""
Sampling locations on the sphere
================================

Draws 100,000 uniformly distributed patch centres, builds the 1-degree
neighbour graph and reports the mean nearest-neighbour distance. A uniform
Poisson process of density rho has mean nearest-neighbour distance
1 / (2 sqrt(rho)), which gives a check on the number.

Also shows how the triplet sampler favours near neighbours.
"""

# %%
import math
import time

import numpy as np

from sarfusion import geosample

n = 100_000
pts = geosample.sample_sphere_uniform(0, n)
t0 = time.perf_counter()
graph = geosample.build_neighbor_graph(pts)
print(f"graph over {n:,d} points in {time.perf_counter() - t0:.1f} s, "
      f"{len(graph.anchors()):,d} points have a neighbour within 1 degree")

area = 4 * math.pi * geosample.EARTH_RADIUS_KM**2
expected = 0.5 / math.sqrt(n / area)
print(f"mean nearest-neighbour distance {geosample.mean_nearest_neighbor_km(graph):.2f} km "
      f"(Poisson estimate {expected:.2f} km)")
# restricting the same number of samples to land (~29% of the surface)
print(f"same count on land only: about {0.5 / math.sqrt(n / (0.29 * area)):.1f} km")

# %%
# Triplet draws
# -------------
# For one anchor, compare empirical neighbour frequencies with the softmax
# over negative distances.

anchor = int(max(graph.anchors(), key=lambda a: len(graph.neighbor_ids(a))))
ids, km = graph.neighbor_ids(anchor), graph.neighbor_km(anchor)
t = graph.mean_edge_km()
p = geosample.neighbor_probabilities(km, t)
picks = np.array([geosample.draw_triplet(graph, anchor, [1, s], t).neighbor for s in range(5000)])
print(f"\nanchor {anchor}, temperature {t:.1f} km")
for j, d, pj in zip(ids, km, p):
    print(f"  neighbour {j:>6d}  {d:6.1f} km  p={pj:.3f}  observed {np.mean(picks == j):.3f}")
