"""Instruction-based image editing as diptych inpainting with a toy diffusion transformer."""

__version__ = "0.1.0"
