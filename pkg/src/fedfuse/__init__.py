"""Federated multimodal emotion classification.

Two modality pipelines (a from-scratch CNN over 48x48 grayscale faces and a
random forest over physiological window features) trained under federated
averaging, with decision-level fusion of the two per-sample predictions.
"""

__version__ = "0.1.0"
