"""adaptok: adaptive mixed-resolution token allocation.

Coarse tokens are scored for class-boundary content; only patches with
boundary evidence receive finer tokens, the mixed-resolution set is refined
with cluster attention, and per-sample compute is accounted analytically.
"""

__version__ = "0.1.0"

from . import boundary, clusterattn, config, flops, geometry, stage1, stage2, tensor  # noqa: F401
