"""Few-shot classification with fine-tuning on fewer base classes.

Everything operates on precomputed embeddings; see ``fewbase.cli`` for the
command-line interface.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .datastore import FeatureSet, load_feature_set, save_feature_set
from .episodes import Episode, sample_md_episode, sample_uniform_episode
from .selection import ClassSubset, select_aa, select_uot

__all__ = [
    "Episode",
    "FeatureSet",
    "ClassSubset",
    "load_feature_set",
    "save_feature_set",
    "sample_md_episode",
    "sample_uniform_episode",
    "select_aa",
    "select_uot",
]
