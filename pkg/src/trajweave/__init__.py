"""Self-supervised vehicle-trajectory modeling on road networks.

Feature-domain tokenization of GPS trajectories, a hierarchical attention
encoder with masked auto-regressive block generation, joint
reconstruction + contrastive pre-training, and zero-shot / fine-tuned task
adapters (OD travel time, trajectory recovery, trajectory prediction,
similar trajectory search).
"""

__version__ = "0.1.0"
