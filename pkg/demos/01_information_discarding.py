"""How much input information does a layer throw away?

Fits per-cell perturbation scales for one probe image at the fc1 layer of a
briefly trained classifier, then prints the entropy map with foreground
cells marked and writes a PGM heatmap next to this script.

    python3 demos/01_information_discarding.py
"""
from pathlib import Path

import numpy as np

from kplab import io as kio
from kplab.data import gen_dataset
from kplab.lab import ExperimentConfig
from kplab.metrics import count_knowledge_points
from kplab.nn import Network, TrainConfig, default_spec, train
from kplab.quantify import entropy_map, optimize_sigma

train_set = gen_dataset(seed=0, n_per_class=60, classes=4, scale=1.6)
probe = gen_dataset(seed=0, n_per_class=1, classes=4, split="probe", scale=1.6)
spec = default_spec(4)
series = train(spec, train_set, TrainConfig(epochs=5, batch_size=16, lr=0.02, seed=0))
print(f"training accuracy after 5 epochs: {series.accuracy:.3f}")

net = Network(spec, series.final)
cfg = ExperimentConfig().quantifier_config()
sample = probe[0]
field = optimize_sigma(net.feature_fn("fc1"), sample.image, cfg, sample_id=0, tap="fc1")
emap = entropy_map(field, sample.cell_mask(cfg.grid))
print(f"validation loss {field.loss_initial:.3g} -> {field.loss_final:.3g}")

kp = count_knowledge_points(emap, b=0.2)
print(f"background baseline H = {kp.baseline:.3f}; N_fg = {kp.n_fg}, N_bg = {kp.n_bg}")
print("entropy per cell (* = foreground, ! = knowledge point):")
points = kp.foreground_points | kp.background_points
for r in range(emap.H.shape[0]):
    row = []
    for c in range(emap.H.shape[1]):
        i = r * emap.H.shape[1] + c
        mark = ("!" if i in points else " ") + ("*" if emap.foreground[r, c] else " ")
        row.append(f"{emap.H[r, c]:6.2f}{mark}")
    print(" ".join(row))

out = Path(__file__).with_name("fc1_entropy.pgm")
kio.write_pgm(out, emap)
print(f"heatmap written to {out} (darker = less information discarded)")
print("pixel mask:\n" + "\n".join("".join("#" if v else "." for v in row) for row in sample.mask[::2, ::2]))
