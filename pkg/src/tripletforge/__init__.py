"""tripletforge: curation toolkit for instruction-editing triplet datasets.

Submodules:
  images     8-bit buffers, PNG/PPM interchange, content-addressed stores
  records    triplet data model, validation, JSONL manifests
  grounding  retrieval grounding, softmax sampling, clustering, dedup
  bootstrap  inversion, composite transitions, retry mining, localization
  filters    IoU gates, DLT/RANSAC homography, alignment, blur metric
  augment    deterministic photometric/structural triplet synthesis
  preference strict-dominance pairing and the diffusion preference loss
  scheduler  mixed-resolution batch planning and task mixing
  pipeline   config-driven stages behind the `forge` CLI
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    augment,
    bootstrap,
    filters,
    grounding,
    images,
    pipeline,
    preference,
    records,
    scheduler,
)
