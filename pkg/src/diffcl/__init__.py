"""Semi-supervised volumetric segmentation with a diffusion-conditioned
segmenter, a high-frequency Mamba block and contrastive label propagation."""
__version__ = "0.1.0"
