"""
Implicit representation of deformable objects under contact:
a nominal-shape SDF, a wrench-conditioned deformation field, force and
action modules for dynamics, and particle-filter state estimation.
"""

__version__ = "1.0.0"
