"""Dynamic Gaussian surfel engine.

Static surfel clouds warped per frame by bone-driven dual-quaternion fields,
rasterized with a differentiable tile splatter, warm-started from a
backward-warped neural SDF, and usable as confidence-filtered guidance for
masked-denoising video generation.
"""

__version__ = "0.1.0"
