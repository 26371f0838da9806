"""Masked-feature pretraining and transfer stack for grayscale images.

Library layout:
    tensor/autodiff/ops   reverse-mode float32 tensor engine
    optim                 AdamW, cosine schedule
    rng                   counter-based deterministic streams
    imaging/manifest      decoding, augmentation, corpus CSVs
    synth                 procedural corpora for desk-scale runs
    vit                   the transformer backbone
    pretrain              masked-token feature reconstruction
    heads/finetune        classification + segmentation transfer
    metrics/interpret     evaluation and activation maps
    cli                   the `xraymim` command
"""

__version__ = "0.1.0"
