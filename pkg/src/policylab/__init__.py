"""Desk-scale policy internalization lab.

Synthetic decision-tree policies over a small object ontology, an exact
evaluation oracle, tool-call scoring, masked/CoT supervised losses, and
group-based RL (GRPO/DAPO variants with policy-aware rollout augmentation),
all runnable on a tiny from-scratch autoregressive token model.
"""

__version__ = "0.1.0"
