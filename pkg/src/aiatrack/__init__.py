"""Visual tracking with attention-in-attention correlation refinement, in pure numpy."""
from .attention import AttentionConfig, MultiHeadAttention
from .model import TrackerConfig, TrackerNet
from .tracking import Tracker, track_sequence

__all__ = ["AttentionConfig", "MultiHeadAttention", "TrackerConfig", "TrackerNet", "Tracker", "track_sequence"]
__version__ = "0.1.0"
