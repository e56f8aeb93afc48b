"""Render a small dataset, train the motion bottleneck for a few hundred steps and evaluate it.

Run: python demos/stage1_flow.py [workdir]
A few minutes on one CPU. Longer runs use the CLI with configs/desk.ini.
"""
import sys
from pathlib import Path

from moalign.config import load_config
from moalign.evaluate import evaluate
from moalign.synthvid import make_dataset
from moalign.train import load_clips, train_stage1

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_runs")
desk = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"

train = make_dataset(work / "train", 64, seed=1)
heldout = make_dataset(work / "heldout", 16, seed=2)

cfg = load_config(desk, steps=300, lr=1e-3, out=str(work / "stage1"))
res = train_stage1(cfg, load_clips(train))
print(f"flow loss: first step {res.rows[0]['loss_flow']:.4f}, last step {res.rows[-1]['loss_flow']:.4f}")

ev = evaluate(res.checkpoint, heldout)
print(f"held-out EPE {ev['epe']:.4f} vs zero-flow {ev['epe_zero']:.4f} (ratio {ev['epe_ratio']:.3f})")
print("artifacts in", res.out_dir)
