"""Counterfactual-invariant diffusion explainer for causal subgraph inference."""

__version__ = "0.1.0"
