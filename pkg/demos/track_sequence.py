"""Track synthetic sequences and score them.

Pretrains a toy network, then tracks one sequence from each difficulty
tier with and without box regression. Each frame costs a single backbone
pass; every candidate and every training sample is read off that map.
"""
import numpy as np

from roitrack.eval_harness.metrics import evaluate
from roitrack.eval_harness.synthetic import generate_sequence, standard_suite, training_domains
from roitrack.network import NetworkConfig
from roitrack.pretrain import DomainDataset, PretrainConfig, pretrain_loop
from roitrack.tracker import TrackerConfig, run_sequence

net = NetworkConfig.toy()
params = pretrain_loop(DomainDataset(training_domains()), PretrainConfig.toy(), net, seed=0).params

print(f"{'sequence':14s} {'auc':>6s} {'prec20':>6s} {'auc-bbr':>8s} passes  long updates  short updates")
for name, spec, seed in standard_suite(per_tier=1):
    seq = generate_sequence(spec, seed, name)
    full = run_sequence(seq, params, net, TrackerConfig.toy(), seed=0)
    raw = run_sequence(seq, params, net, TrackerConfig.toy(bbr=False), seed=0)
    a, b = evaluate(full.boxes, seq.gt), evaluate(raw.boxes, seq.gt)
    print(f"{name:14s} {a.auc:6.3f} {a.precision_20:6.3f} {b.auc:8.3f} {full.forward_passes:6d}  "
          f"{len(full.long_updates):12d}  {len(full.short_updates):13d}")
    low = np.flatnonzero(full.scores < 0.5)
    if low.size:
        print(f"{'':14s} low-confidence frames: {low.tolist()[:10]}")
