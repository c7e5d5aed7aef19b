"""triforge: desk-scale two-stage text-to-3D pipeline.

Stage 1 fits tri-plane fields to multi-view renders, compresses them with a
tri-plane VAE, and samples new latents with a conditional diffusion model.
Stage 2 converts the coarse mesh to an SDF grid with a hash-grid texture and
refines it with score distillation. A caption pipeline with pluggable LLM
providers produces the text conditioning data.
"""

__version__ = "0.1.0"
