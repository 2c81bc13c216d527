"""Concept discovery and multiscale occlusion maps for split CNN classifiers."""

from .backend import ChannelMask, ModelBundle, load_model_bundle
from .cache import ArrayCache, CachedModel
from .clustering import ConceptPartition, elbow_select, kmeans, silhouette
from .mage import MageConfig, build_representatives
from .msiv import MsivConfig, msiv_run, quadtree_search
from .patching import PatchCoord, PatchGrid

__all__ = [
    "ArrayCache", "CachedModel", "ChannelMask", "ConceptPartition", "MageConfig", "ModelBundle",
    "MsivConfig", "PatchCoord", "PatchGrid", "build_representatives", "elbow_select", "kmeans",
    "load_model_bundle", "msiv_run", "quadtree_search", "silhouette",
]
