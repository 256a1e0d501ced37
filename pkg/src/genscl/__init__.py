"""
genscl

Generalized supervised contrastive learning: losses, analytic gradients,
MixUp/CutMix views, distillation targets and a desk-scale trainer.
"""

__version__ = "0.1.0"

from .launcher import main

__all__ = ["main"]
