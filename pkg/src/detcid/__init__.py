"""Instance-level detection of elongated touching cells.

Subpackages cover the full pipeline: SEM-like image synthesis with exact
ground truth, an adversarial region-proposal network, mask-based detection
with overlap NMS, and a detection/segmentation evaluation suite.
"""

__version__ = "0.1.0"
