"""Multi-robot robust pose-graph optimization library.

Subpackages cover core geometry, pose-graph data/IO, graduated non-convexity,
the distributed block-coordinate solver and its network simulator, a pairwise
consistency baseline, deformation-graph mesh correction, and evaluation
metrics. See README.md for an overview and the demos/ directory for worked
examples.
"""

from .geometry import Pose3, Rot3, LiftedPose, compose, boxminus, boxplus  # noqa: F401
from .pose_graph import MultiRobotPoseGraph, NodeId, Edge, EdgeKind, Truth  # noqa: F401

__version__ = "0.1.0"
