"""Train with each matcher on one seed, then inspect the trained prompts.

Usage: python3 demos/03_train_and_compare.py [iterations]   (default 600)

The full acceptance ablation uses 3000 iterations and five seeds; this demo
runs a shorter schedule so it finishes in a couple of minutes.
"""

import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from mpotseg import cli, io
from mpotseg.config import ExperimentConfig

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 600
base = ExperimentConfig()
base = replace(base, schedule=replace(base.schedule, total_iters=iters, eval_every=max(1, iters // 4)))

out = Path(tempfile.mkdtemp(prefix="mpotseg-demo-"))
print(f"Training {iters} iterations per matcher, writing to {out}\n")
for matcher in ("sinkhorn", "hungarian", "none"):
    cfg = replace(base.with_matcher(matcher), out=str(out / matcher))
    s = cli.run_train(cfg)
    print(f"{matcher:9s} seen={s.final['miou_seen']:.3f} unseen={s.final['miou_unseen']:.3f} "
          f"hIoU={s.final['hiou']:.3f} dispersion={s.dispersion:.3f} ({s.seconds:.0f}s)")

# metrics.csv holds one row per evaluation step.
print("\nsinkhorn metrics.csv:")
for row in io.read_csv(out / "sinkhorn" / "metrics.csv"):
    print(f"  step {row['step']:>5} phase {row['phase']} loss {float(row['loss_total']):8.3f} "
          f"hIoU {float(row['hiou']):.3f}")

# Score maps of the trained checkpoint as 8-bit graymaps plus a scale sidecar.
ckpt = out / "sinkhorn" / "checkpoint.bin"
files = cli.dump_score_maps(ckpt, None, out / "sinkhorn" / "maps")
print(f"\nWrote {len(files)} score-map images to {out / 'sinkhorn' / 'maps'}")

rows = cli.report_diagnostics(ckpt, out / "sinkhorn", classes=[0, 1])
for r in rows:
    layer = f" layer {r['layer']}" if r["layer"] != "" else ""
    print(f"  class {r['class']} {r['kind']}{layer}: {r['value']:.4f}")
