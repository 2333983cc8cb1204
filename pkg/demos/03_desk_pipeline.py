"""The whole pipeline at desk scale: data, toy pretraining, both training stages, evaluation.

Run: python demos/03_desk_pipeline.py WORKDIR [--quick]

``--quick`` shrinks every stage so the script finishes in about a minute; the
numbers are then meaningless but every code path runs. Without it the default
configuration is used (roughly ten minutes on one core).
"""
import argparse

import torch

from latentseg import report
from latentseg.config import RunConfig
from latentseg.workflow import run_desk

ap = argparse.ArgumentParser()
ap.add_argument("workdir")
ap.add_argument("--quick", action="store_true")
args = ap.parse_args()

torch.set_num_threads(1)
cfg = RunConfig()
if args.quick:
    cfg = cfg.replace(**{"data.n_train": 24, "data.n_test": 8, "n1": 50, "n2": 50,
                         "pretrain.denoiser_steps": 50, "pretrain.seg_steps": 200})
run = run_desk(cfg, args.workdir, control=True)
for stage, secs in run.timings.items():
    print(f"{stage:18s} {secs:7.1f}s")
print(report.table(run.reports))
print(report.score_table({"stage1": run.reports["stage1"]}))
print("report written to", report.write_report(run.reports, f"{args.workdir}/report"))
