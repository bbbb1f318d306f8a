"""Instantiate the network, run a forward pass, and compare the analytic
parameter/FLOP counter with the live parameter store."""

import numpy as np

from lgmsnet import ModelConfig, Tensor, count_params_flops, init_params, lgmsnet_forward

cfg = ModelConfig(stage_channels=(8, 16, 32, 64, 64), input_channels=1)
store = init_params(cfg, 0)
x = Tensor(np.random.default_rng(0).random((2, 1, 64, 64), dtype=np.float32))
logits, feats = lgmsnet_forward(x, cfg, store, training=False, return_features=True)
print("logits", logits.shape)
for name, f in feats.items():
    print(f"  {name:5s} {f.shape}")

report = count_params_flops(cfg, (64, 64))
print(f"counter {report.total_params} params, store {store.num_elements()}")
for name, params, flops in report.breakdown:
    print(f"  {name:12s} {params:8d} params {flops / 1e6:8.2f} MFLOPs")

default = count_params_flops(ModelConfig())
print(f"default config at 256x256: {default.total_params / 1e6:.2f}M params, {default.total_flops / 1e9:.2f} GFLOPs")
