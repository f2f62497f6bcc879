"""Bandwidth allocation for sliced wireless networks.

QoS-aware user scheduling, an iterative optimal allocator, a scalable
GNN allocator trained by unsupervised gradient ascent, and hybrid-task
meta-learning for cross-scenario generalization.
"""

__version__ = "0.1.0"
