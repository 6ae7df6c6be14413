"""recx: desk-scale sparse-view 3D reconstruction.

Procedural synthetic scenes -> simulated pairwise pointmaps -> global
alignment -> structure-conditioned toy video diffusion -> confidence-
aware Gaussian splatting, with every numerical component verified
against independent oracles.
"""

__version__ = "0.1.0"
