"""Label-guided 3D latent diffusion on liver-like phantoms.

Synthesizes paired (label map, volume) datasets with a two-stage latent
diffusion pipeline (label LDM -> ControlNet-conditioned volume LDM) and
measures their utility for downstream segmentation.
"""

__version__ = "0.1.0"

CLASS_NAMES = ("background", "liver", "portal_vein", "hepatic_vein", "tumor")
N_CLASSES = len(CLASS_NAMES)
