"""Multimodal outcome prediction on patient population graphs.

Segmentation-derived lung radiomics and clinical metadata are fused per
patient, patients are linked in a feature-weighted KNN graph, and a graph
attention network classifies each patient from its neighbourhood.
"""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
