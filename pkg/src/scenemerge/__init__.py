"""scenemerge: merge per-subset 3D reconstructions into one global scene.

The pipeline orders unordered images into a pseudo-video, partitions it into
overlapping interleaved subsets, aligns per-subset reconstructions with a
robust Sim(3) solver, links multi-view tracks across subsets, and refines
everything with a confidence-weighted global bundle adjustment.
"""

__version__ = "0.1.0"
