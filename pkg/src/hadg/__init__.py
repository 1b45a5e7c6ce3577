"""Hospital-agnostic domain generalization at desk scale.

Episodic meta-train/meta-test training with cross-entropy, hospital-alignment
and triplet losses, slide tiling preprocessing, synthetic multi-hospital
corpora, and leave-one-hospital-out evaluation.
"""

__version__ = "0.1.0"
