"""
External Services Package
"""

from .plugins import (
    BuiltinClassifier, BuiltinMatcher, BuiltinSegmenter, ClassifierPlugin, MatcherPlugin, SegmenterPlugin,
    create_classifier, create_matcher, create_segmenter,
)
from .subprocess_plugin import SubprocessMatcher, SubprocessSegmenter

__all__ = [
    "MatcherPlugin", "SegmenterPlugin", "ClassifierPlugin",
    "BuiltinMatcher", "BuiltinSegmenter", "BuiltinClassifier",
    "SubprocessMatcher", "SubprocessSegmenter",
    "create_matcher", "create_segmenter", "create_classifier",
]
