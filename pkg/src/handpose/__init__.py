"""Hand pose estimation from xyz point clouds by matching against synthetic prototype clouds.

Stages: RANSAC background-plane removal, clustering, and ICP matching of
synthetic prototype clouds, with a synthetic scene generator for offline runs.
"""

__version__ = "0.1.0"
