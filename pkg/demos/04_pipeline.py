"""
End-to-end: pretrain, fine-tune, evaluate, report
=================================================

A miniature version of the experiment grid on 32x32 patches: every
pretraining objective with a ResNet18 encoder, one epoch each. The numbers
are meaningless at this scale. The point is to see the artifacts each stage
writes. The same steps are available from the shell as
``python -m sarfusion {synth,pretrain,finetune,evaluate,grid,report}``.
"""

# %%
import tempfile
from pathlib import Path

from sarfusion import cli
from sarfusion.config import from_dict

work = Path(tempfile.mkdtemp())
cfg = from_dict({
    "data": {"root": str(work / "data")},
    "synth": {"n_samples": 24, "patch_size": 32, "seed": 0},
    "pretrain": {"epochs": 1, "batch_size": 8, "input_size": 32},
    "finetune": {"epochs": 2, "batch_size": 8, "input_size": 32},
    "grid": {"encoders": ["resnet18"]},
}).with_overrides(deterministic=True)

cli.cmd_synth(cfg)

# %%
# The grid
# --------
# Cells with a DONE marker are skipped, so rerunning after an interruption
# picks up where it stopped.

res = cli.cmd_grid(cfg, work / "grid")
print("executed", res["executed"])
print(res["grid_table"].read_text())
print("rerun executes", cli.cmd_grid(cfg, work / "grid")["executed"])

# %%
# Report
# ------

from sarfusion.report import write_report  # noqa: E402

svg, csv_path = write_report([work / "grid" / "cells"], work / "report")
print(svg)
print(csv_path.read_text())
