"""Brute-force reference implementations; deliberately share no code with sograb."""

import math
from collections import Counter


def dist(a, b):
    dx, dy, dz = a[0] - b[0], a[1] - b[1], a[2] - b[2]
    return math.sqrt(dx * dx + dy * dy + dz * dz)


def brute_nearest(points, q):
    best_i, best_d = -1, math.inf
    for i, p in enumerate(points):
        d = dist(q, p)
        if d < best_d:
            best_i, best_d = i, d
    return best_i, best_d


def brute_one_sided(s, t, alpha):
    s, t = [tuple(map(float, p)) for p in s], [tuple(map(float, p)) for p in t]
    matches = [brute_nearest(t, x) for x in s]
    counts = Counter(i for i, _ in matches)
    return sum(1.0 - math.exp(-alpha * d) / counts[i] for i, d in matches) / len(s)


def brute_dcd(s1, s2, alpha):
    return 0.5 * (brute_one_sided(s1, s2, alpha) + brute_one_sided(s2, s1, alpha))
