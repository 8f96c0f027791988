"""Joint-policy PPO with an autoregressive Transformer policy for cooperative multi-agent RL."""

__version__ = "0.1.0"
