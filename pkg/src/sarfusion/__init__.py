"""Self-supervised encoders for paired SAR / multispectral patches.

Modules
-------
data_model     sample container, manifests, band statistics, normalisation
synthgen       deterministic synthetic S1/S2/land-cover generator
geosample      sphere sampling, neighbour graph and triplet draws
nn_backend     operator contract (shapes, parameter counts) and gradient checks
encoders       DownBlock / UpBlock / AttnBlock, ResNet encoders, deconvolutional header
pretrain       VAE, tile2vec and contrastive sensor fusion objectives
finetune_eval  segmentation fine-tuning and IoU metrics
cli            experiment runner
"""

__version__ = "0.1.0"
