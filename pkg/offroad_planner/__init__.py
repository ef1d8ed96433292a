"""
Hybrid offroad planner: learned event prediction, ensemble uncertainty,
moving horizon estimation and sampling-based MPC over a synthetic terrain world.
"""

__version__ = "1.0.0"
