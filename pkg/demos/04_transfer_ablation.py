"""A small strategy ablation on the redundancy-stressed shift task.

Fits the backbone on the source domain, adapts it to the shifted target with
each strategy over three seeds, prints the table and writes an
accuracy-versus-memory plot next to this script.

Run: python3 demos/04_transfer_ablation.py   (about half a minute)
"""

from dataclasses import replace
from pathlib import Path

from sherl.config import load_ablation
from sherl.harness import Strategy, ablate
from sherl.plotting import accuracy_memory_plot

cfg = load_ablation(Path(__file__).resolve().parents[1] / "configs" / "acceptance.ini")
base = replace(cfg.base, train=replace(cfg.base.train, epochs=10))
grid = [Strategy("SHERL", "MTSA"), Strategy("SHERL", "LinearA"), Strategy("LinearProbe"), Strategy("FullFT")]

rows = ablate(grid, base, seeds=(1, 2, 3))
for row in rows:
    lo, hi = row.spread
    print(f"{row.label:22s} acc {row.mean:.3f} [{lo:.3f}, {hi:.3f}]  params {row.n_params:6d}  "
          f"retained {row.retained_bytes:9d} B")
out = accuracy_memory_plot(rows, Path(__file__).with_name("ablation_demo.svg"))
print("plot:", out)
