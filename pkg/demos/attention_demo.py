"""Where does the coarse alignment look?

    python demos/attention_demo.py out_dir

Trains a detector on the source domain for a few hundred iterations, then
writes each target test image next to its attention map (PGM, 255 = strong
foreground). Attention should concentrate on the coloured shapes; the
background stays at zero because only locations above the map's mean survive.
"""

import sys
from pathlib import Path

from cffa import RunConfig, pretrain
from cffa.domains import write_ppm
from cffa.evaluation import export_attention
from cffa.experiment import build_domains

out = Path(sys.argv[1] if len(sys.argv) > 1 else "attention_demo")
out.mkdir(parents=True, exist_ok=True)
config = RunConfig().with_train(pretrain_iters=400)
domains = build_domains(config)
model = pretrain(config, domains["source_train"]).model
for sample in domains["target_test"][:6]:
    write_ppm(out / f"{sample.id}.ppm", sample.image)
    export_attention(model, sample.image, out / f"{sample.id}_attention.pgm")
print(f"wrote 6 image/attention pairs to {out}")
