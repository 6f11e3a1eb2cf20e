# End-to-end walkthrough on a tiny synthetic dataset
#
# The complete pipeline at toy scale: generate a 40-image synthetic
# dataset, train the multi-branch model for two short stages, calibrate
# thresholds, evaluate every method on the test split, and export one
# class-activation heatmap.  Everything runs through the same command
# functions the `faceparts` console script uses, so the artifacts on disk
# match a real run -- just smaller.  Takes about a minute on one core.

import tempfile
from pathlib import Path

from faceparts.cli import main

workdir = Path(tempfile.mkdtemp(prefix="faceparts_demo_"))
out = workdir / "out"
print(f"working under {workdir}")

# Step 1: a synthetic dataset of 24 train / 8 val / 8 test images with six
# region-localized attributes.

assert main(["synth", "--out", str(out), "--train", "24", "--val", "8",
             "--test", "8", "--seed", "0"]) == 0

# Step 2: a config for a very narrow model (1/32 of the published channel
# widths) and two training epochs per stage.

config = workdir / "run.ini"
config.write_text(f"""[data]
dataset_dir = {out / 'datasets' / 'synthetic'}

[model]
width_scale = 0.03125
seed = 0

[train]
stage1_epochs = 2
stage2_epochs = 2
batch_size = 8
keep_per_attribute = 5
""")

# Step 3: two-stage training.  Stage 1 trains all 16 predictors on every
# attribute; the validation ranking then prunes each attribute down to
# keep_per_attribute predictors (always keeping FULL and GP) before stage
# 2 fine-tunes the surviving heads.

assert main(["train", "--config", str(config), "--out", str(out)]) == 0
print()
print("ranking table head:")
for line in (out / "tables" / "ranking.csv").read_text().splitlines()[:6]:
    print(f"  {line}")

# Step 4: calibrate per-(predictor, attribute) thresholds on validation
# scores, then score every method on the test split.

assert main(["calibrate", "--config", str(config), "--out", str(out)]) == 0
assert main(["eval", "--config", str(config), "--out", str(out)]) == 0

print()
print("report head:")
for line in (out / "reports" / "report.csv").read_text().splitlines()[:7]:
    print(f"  {line}")

# Step 5: fused per-image decisions with the product-rule committee.

assert main(["predict", "--config", str(config), "--out", str(out),
             "--aggregator", "product"]) == 0
print()
print("predictions:")
for line in (out / "reports" / "predictions.csv").read_text().splitlines():
    print(f"  {line}")

# Step 6: a class-activation heatmap for the full-face predictor on the
# chin-patch attribute.  The .pgm file is the raw heat map, the .ppm is
# the crop with heat overlaid in red.

assert main(["cam", "--config", str(config), "--out", str(out),
             "--predictor", "FULL", "--attribute", "patch_chin"]) == 0
print()
print("heatmaps:", sorted(p.name for p in (out / "heatmaps").iterdir()))
print()
print(f"all artifacts under {out}")
print("done")
