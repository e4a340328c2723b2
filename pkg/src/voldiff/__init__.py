"""Desk-scale latent diffusion pipeline for 3D volumes.

Building blocks: a patch-volume vector-quantized autoencoder with a joint
whole-volume decoder, a latent denoising diffusion model driven by a
dual-flow noise estimator, conditional adapter fine-tuning through zero
connectors, procedural phantom data, and an evaluation metric suite.
"""

__version__ = "0.1.0"
