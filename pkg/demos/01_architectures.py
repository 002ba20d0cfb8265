"""
Encoder and header architectures
================================

Builds the three encoder variants and the deconvolutional segmentation
header, then prints their parameter counts layer by layer next to the closed
forms the library derives from the block definitions.
"""

# %%
# Parameter tables
# ----------------

import torch

from sarfusion import encoders

for variant in ("resnet18", "resnet34", "resnet18attn"):
    net = encoders.build_encoder(variant, seed=0)
    built = encoders.layer_parameter_counts(net)
    closed = encoders.encoder_param_table(variant)
    print(f"\n{variant}")
    for name, n in built.items():
        print(f"  {name:<8s}{n:>12,d}  closed form {closed[name]:>12,d}")
    print(f"  {'total':<8s}{encoders.count_parameters(net):>12,d}")

header = encoders.build_deconv_header(7, seed=0)
print("\ndeconv header (nc=7)")
for name, n in encoders.layer_parameter_counts(header).items():
    print(f"  {name:<8s}{n:>12,d}")
print(f"  {'total':<8s}{encoders.count_parameters(header):>12,d}")

# %%
# Shapes through the network
# --------------------------
# A 14-band 128x128 patch becomes a [512, 8, 8] latent, and the header maps
# it back to per-pixel logits.

x = torch.randn(2, 14, 128, 128)
enc = encoders.build_encoder("resnet18attn").eval()
with torch.no_grad():
    latent = encoders.forward_embed(enc, x)
    logits = header.eval()(latent)
print("\nlatent", tuple(latent.shape), "logits", tuple(logits.shape))
print("pooled embedding", tuple(encoders.pool_embedding(latent).shape))

# %%
# The attention gate
# ------------------
# gamma starts at zero, so each attention block passes its input through.

blk = encoders.build_attn_block(256)
h = torch.randn(1, 256, 16, 16)
with torch.no_grad():
    print("gamma", blk.gamma.item(), "max |blk(h) - h|", (blk(h) - h).abs().max().item())
