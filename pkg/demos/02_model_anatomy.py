"""Walk the network piece by piece.

Builds the desk-scale ("tiny") dual-task model and inspects each stage:
the shared five-stage SE residual encoder, the pyramid-pooling center, the
change decoder with dual attention, the deep-supervision heads, and the
twin segmentation decoders. Ends with the weight-sharing arithmetic.
"""

import torch

from dtcd.config import ModelConfig
from dtcd.model import DualAttention, build_model, count_trainable

cfg = ModelConfig.preset("tiny")
model = build_model(cfg, seed=0)
model.eval()
print(f"tiny preset: {count_trainable(model):,} trainable parameters")

x1 = torch.rand(1, 3, 64, 64)
x2 = torch.rand(1, 3, 64, 64)

# Encoder: spatial size halves at every stage, channels follow the preset.
with torch.no_grad():
    pyramid = model.encoder(x1)
for i, stage in enumerate(pyramid.stages, start=1):
    print(f"  stage {i}: {tuple(stage.shape)}")

# One forward pass produces the change map, four auxiliary maps
# (deepest first), and one building mask per epoch.
with torch.no_grad():
    out = model(x1, x2)
print("change map:", tuple(out.change_prob.shape))
print("aux maps:  ", [tuple(a.shape) for a in out.change_aux])
print("seg maps:  ", tuple(out.seg_prob_t1.shape), tuple(out.seg_prob_t2.shape))

# Dual attention starts as the identity: both scale parameters are zero, so
# enabling it never degrades a fresh model.
dam = DualAttention(16)
f = torch.randn(1, 16, 8, 8)
print("dual attention max |out - in| at init:", (dam(f) - f).abs().max().item())
rows = dam.position_affinity(f).sum(-1)
print("position affinity row sums:", rows.min().item(), "to", rows.max().item())

# Weight sharing: the same encoder and the same segmentation decoder serve
# both epochs, so identical inputs give bitwise-identical masks.
with torch.no_grad():
    twin = model(x1, x1)
print("twin segmentation outputs identical:",
      torch.equal(twin.seg_prob_t1, twin.seg_prob_t2))
enc = count_trainable(model.encoder)
ssn = count_trainable(model.ssn_blocks) + count_trainable(model.ssn_final)
print(f"a non-shared variant would add {enc:,} encoder + {ssn:,} decoder parameters")
