"""TreeQN / ATreeC: differentiable tree planning for deep RL on a box-pushing task."""

__version__ = "0.1.0"
