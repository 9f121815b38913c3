"""Pillar-grid LiDAR scene flow on synthetic run segments.

Subpackages/modules map to the pipeline stages: geom (rigid transforms),
scene (generator + flow oracle), annotate (box-bootstrapped labels),
pillars (dynamic voxelization), net (flow network + training), metrics,
bench, formats (binary I/O), pipeline (dataset plumbing), cli.
"""

__version__ = "0.1.0"
