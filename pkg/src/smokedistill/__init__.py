"""Train small real-time smoke segmenters from bounding-box labels.

Pipeline: box-annotated manifest -> teacher pseudo-labels -> three-headed
student trained with a four-term distillation loss -> sample-wise metrics
and frame-rate benchmarks.
"""

__version__ = "0.1.0"
