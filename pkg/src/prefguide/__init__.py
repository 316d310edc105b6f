"""Preference-guided diffusion on a 2D toy: DPO, SFT, PGD/cPGD guidance, merging, distillation."""

__version__ = "0.1.0"
