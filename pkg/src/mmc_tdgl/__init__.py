"""Phase-separation simulation of MMC hydrogels with semi-implicit TDGL schemes."""

__version__ = "0.1.0"
