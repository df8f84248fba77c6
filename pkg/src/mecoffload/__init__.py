"""Multi-device MEC task-offloading simulator with client-master multi-agent RL."""

__version__ = "0.1.0"
