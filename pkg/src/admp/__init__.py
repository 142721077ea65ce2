"""Adversarial double-mask pruning for cross-domain channel pruning at desk scale."""
