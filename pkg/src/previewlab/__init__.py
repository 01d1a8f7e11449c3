"""previewlab: train tiny video diffusion models, preview them mid-denoise, steer the result."""

__version__ = "0.1.0"
