"""Battery plate endpoint detection at desk scale.

Synthetic X-ray scene generation with exact ground truth, distance
adaptive label generation, a point/line/counting segmentation network
trained with from-scratch reverse-mode differentiation, classical corner
baselines, and an eight-metric evaluation harness behind one CLI.
"""

__version__ = "0.1.0"
