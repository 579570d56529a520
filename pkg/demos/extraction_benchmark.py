"""Shared-map extraction against one network pass per candidate.

The per-candidate path warps every box to the network input and runs the
backbone on each crop; the shared path runs it once over a crop enclosing
all boxes. The gap grows roughly linearly with the number of candidates.
"""
from roitrack.eval_harness.bench import benchmark_extraction
from roitrack.network import NetworkConfig

for n in (1, 16, 64, 256):
    rep = benchmark_extraction(NetworkConfig.full(), n_rois=n, reps=3)
    print(f"{n:4d} RoIs: shared {rep.shared_seconds * 1e3:8.1f} ms  "
          f"per-candidate {rep.per_candidate_seconds * 1e3:9.1f} ms  speedup {rep.speedup:6.1f}x")
