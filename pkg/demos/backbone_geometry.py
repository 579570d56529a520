"""Geometry of the two backbone variants.

The dense variant drops the second pooling layer and dilates the last
convolution, which keeps the receptive field at 75 pixels while halving
the feature stride.
"""
import numpy as np

from roitrack import backbone as bb

for variant in ("original", "dense"):
    cfg = bb.BackboneConfig.toy(variant=variant)
    plan = " -> ".join(f"{l.name}({l.kernel}/{l.stride}" + (f",d{l.dilation}" if l.dilation > 1 else "") + ")"
                       for l in bb.layer_plan(cfg))
    print(f"{variant:8s} {plan}")
    print(f"         receptive field {bb.receptive_field(cfg)}, stride {bb.feature_stride(cfg)}, "
          f"node-0 centre at {bb.feature_offset(cfg)} px, extent on 107 px: {bb.output_extent(cfg, 107)}")

# a unit impulse only reaches the nodes whose receptive field covers it
cfg = bb.BackboneConfig.toy(variant="dense")
params = {k: np.abs(v) for k, v in bb.init_params(cfg, np.random.default_rng(0)).items()}
crop = np.zeros((3, 107, 107))
crop[:, 10, 100] = 1.0  # near the top-right corner
base = bb.forward_features(np.zeros_like(crop), params, cfg)
hit = bb.forward_features(crop, params, cfg)
print("nodes touched by a corner impulse:\n", (np.abs(hit - base).sum(axis=0) > 0).astype(int))
