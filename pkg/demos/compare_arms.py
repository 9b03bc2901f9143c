"""One seed of the ablation table: source-only, full, without PSA, and 3DC.

    python demos/compare_arms.py [seed]

All four arms adapt from one shared pretrained detector. Prints mAP@0.5,
Correct% of the top detections and per-class proxy A-distance on the target
test split. Roughly five minutes on one core.
"""

import sys

from cffa import RunConfig, run_comparison

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
results = run_comparison(RunConfig(), seed)
baseline = results["source_only"].mAP

print(f"{'arm':<12}{'mAP':>7}{'gain':>8}{'correct':>9}   d_A per class")
for name, r in results.items():
    d_a = " ".join(f"{r.d_a[k]:.3f}" for k in sorted(r.d_a))
    print(f"{name:<12}{100 * r.mAP:7.1f}{100 * (r.mAP - baseline):+8.1f}{r.correct:8.1f}%   {d_a}")
