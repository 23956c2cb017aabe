"""PolyCL: slice-triplet contrastive pre-training for CT segmentation."""

__version__ = "0.1.0"
