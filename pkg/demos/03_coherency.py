"""Rescaling a layer does not change what the layer knows.

Multiplies the fc1 weights and bias by c and divides the next layer's
weights by c.  The network function is unchanged while the fc1 features
grow by c.  Because the quantifier normalises by the feature's own noise
variance, the entropy maps must not move.

    python3 demos/03_coherency.py
"""
import numpy as np

from kplab.data import gen_dataset
from kplab.lab import ExperimentConfig
from kplab.nn import Dense, Network, TrainConfig, default_spec, rescale_layers, train
from kplab.quantify import entropy_map, optimize_sigma_batch

data = gen_dataset(seed=1, n_per_class=30, classes=4, scale=1.6)
probe = gen_dataset(seed=1, n_per_class=2, classes=4, split="probe", scale=1.6)
spec = default_spec(4)
net = Network(spec, train(spec, data, TrainConfig(epochs=3, batch_size=16, lr=0.02, seed=1)).final)
fc1 = [i for i, l in enumerate(spec.layers) if isinstance(l, Dense)][0]
cfg = ExperimentConfig().quantifier_config()
masks = probe.cell_masks(cfg.grid)
before = [entropy_map(s, m).H for s, m in
          zip(optimize_sigma_batch(net.feature_fn("fc1"), probe.images, cfg), masks)]

for c in (4.0, 3.0, 0.1):
    scaled = Network(spec, rescale_layers(spec, net.params, fc1, c))
    drift = np.linalg.norm(scaled.logits(probe.images) - net.logits(probe.images))
    after = [entropy_map(s, m).H for s, m in
             zip(optimize_sigma_batch(scaled.feature_fn("fc1"), probe.images, cfg), masks)]
    worst = max(float(np.max(np.abs(a - b))) for a, b in zip(after, before))
    print(f"c={c:4g}: |logit change| {drift:.1e}, max |dH| over {len(probe)} probes {worst:.1e}")
