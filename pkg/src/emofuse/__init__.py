"""Audio-visual expression recognition head at desk scale.

Submodules:
    tensor      minimal autodiff kernel + finite-difference gradient oracle
    dataio      feature-file format, manifests, windowing, synthetic data
    model       TCN, audio adapter, bi-directional cross-attention, classifier
    objectives  weighted cross entropy, prompt-contrastive loss, macro F1
    trainer     AdamW + cosine schedule training loop and window ablation
    cli         batch-experiment command line
"""

__version__ = "0.1.0"
