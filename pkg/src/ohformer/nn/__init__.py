from ohformer.nn.attention import AttentionCapture, AttentionRecord, ProjectionSet, mhsa
from ohformer.nn.grid import TokenGrid
from ohformer.nn.lrp import Lrp, deform_branch, lrp
from ohformer.nn.model import OHFormer, stem_grid
from ohformer.nn.oh_layer import FlopCounter, OhLayer, oh_layer, score_madds
from ohformer.nn.stack import StackSpec, format_stack, parse_stack

__all__ = [
    "AttentionCapture",
    "AttentionRecord",
    "FlopCounter",
    "Lrp",
    "OHFormer",
    "OhLayer",
    "ProjectionSet",
    "StackSpec",
    "TokenGrid",
    "deform_branch",
    "format_stack",
    "lrp",
    "mhsa",
    "oh_layer",
    "parse_stack",
    "score_madds",
    "stem_grid",
]
