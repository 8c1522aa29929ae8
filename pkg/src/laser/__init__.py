"""Desk-scale laboratory for latent-reasoning training.

Submodules:
    autograd   dense float64 tensors with taped reverse-mode gradients
    model      tiny decoder-only transformer over mixed token/latent inputs
    objective  shrinking-window alignment loss with self-refined soft targets
    data       synthetic scene-scan dataset generation and file formats
    training   AdamW loop with cosine schedule and held-out evaluation
    decoding   latent rollout, top-k trajectory inspection, efficiency report
    rl         group-relative policy fine-tuning over latent trajectories
    cli        laser command line entry point
"""

__version__ = "0.1.0"
