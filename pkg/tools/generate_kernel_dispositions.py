#!/usr/bin/env python3
"""Generate the shipped kernel-point disposition table.

One point is pinned at the origin; the remaining points minimize a pairwise
repulsive potential (sum of inverse distances) with a quadratic pull toward
the center that keeps the configuration bounded. The converged layout is
rescaled so the free points sit at a mean radius of 0.66 inside the unit
ball, which spreads their influence regions across the ball interior.

The result is written as little-endian float32 triples plus a JSON sidecar
recording the generation parameters and the achieved minimum pairwise
distance. Run from the repository root:

    python3 tools/generate_kernel_dispositions.py
"""

import json
from pathlib import Path

import numpy as np

K = 15
SEED = 7
STEPS = 20000
MEAN_RADIUS = 0.66

OUT_DIR = Path(__file__).resolve().parent.parent / "src" / "kp3feat" / "data"


def sample_ball(rng, n):
    pts = []
    while len(pts) < n:
        p = rng.uniform(-1.0, 1.0, size=3)
        if np.linalg.norm(p) <= 1.0:
            pts.append(p)
    return np.array(pts)


def optimize(k, rng):
    free = sample_ball(rng, k - 1) * 0.5
    for step in range(STEPS):
        pts = np.vstack([np.zeros(3), free])
        diff = free[:, None, :] - pts[None, :, :]  # (k-1, k, 3)
        d = np.linalg.norm(diff, axis=2)
        np.fill_diagonal(d[:, 1:], np.inf)
        d = np.maximum(d, 1e-6)
        repulsion = np.sum(diff / d[:, :, None] ** 3, axis=1)
        grad = -repulsion + 2.0 * free
        norm = np.linalg.norm(grad, axis=1, keepdims=True)
        grad = grad / np.maximum(norm, 1.0) * np.minimum(norm, 1.0)  # clip
        lr = 0.02 * (1.0 - 0.9 * step / STEPS)
        free = free - lr * grad
    return free


def main():
    rng = np.random.default_rng(SEED)
    free = optimize(K, rng)
    free = free * (MEAN_RADIUS / np.mean(np.linalg.norm(free, axis=1)))
    layout = np.vstack([np.zeros(3), free]).astype(np.float32)

    radii = np.linalg.norm(layout.astype(np.float64), axis=1)
    assert radii.max() <= 1.0, f"points escape the unit ball: {radii.max()}"
    d = np.linalg.norm(layout[:, None, :].astype(np.float64) - layout[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    min_dist = float(d.min())
    assert min_dist > 0.25, f"layout too clustered: min distance {min_dist}"

    OUT_DIR.mkdir(parents=True, exist_ok=True)
    bin_path = OUT_DIR / f"kernel_dispositions_k{K}.bin"
    layout.astype("<f4").tofile(bin_path)
    meta = {
        "k": K,
        "extent": 1.0,
        "seed": SEED,
        "steps": STEPS,
        "mean_radius": MEAN_RADIUS,
        "min_pairwise_distance": min_dist,
        "max_radius": float(radii.max()),
        "format": "little-endian float32 triples, row per kernel point, first row at the origin",
    }
    (OUT_DIR / f"kernel_dispositions_k{K}.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote {bin_path} (min pairwise distance {min_dist:.4f}, max radius {radii.max():.4f})")


if __name__ == "__main__":
    main()
