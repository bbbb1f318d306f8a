"""Channel redundancy, foreground scale density and the fg/bg spectral ratio
on an untrained network's stage-4 features."""

import numpy as np

from lgmsnet import ModelConfig, init_params, synth_dataset
from lgmsnet.analysis import (
    channel_redundancy,
    fg_bg_singular_ratio,
    fg_scale_density,
    redundancy_report,
    stage_activation,
)

# sanity: rank-one features have one significant singular value
row = np.random.default_rng(0).normal(size=(1, 8, 8))
print("rank-1 count:", channel_redundancy(np.repeat(row, 16, axis=0)))

cfg = ModelConfig(stage_channels=(8, 16, 32, 64, 64), input_channels=1)
store = init_params(cfg, 0)
samples = synth_dataset(12, 64, 1)

rep = redundancy_report(cfg, store, samples, "enc4")
print(f"enc4 significant singular values: mean {rep.mean:.2f} of {cfg.stage_channels[3]} channels")

dens = fg_scale_density([s.mask for s in samples], [s.id for s in samples])
print("foreground ratios:", ", ".join(f"{r:.2f}" for r in dens.ratios))

for s in samples[:4]:
    feat = stage_activation(cfg, store, s.image, "enc2")
    print(f"{s.id}: fg/bg normalized top singular value ratio {fg_bg_singular_ratio(feat, s.mask):.3f}")
