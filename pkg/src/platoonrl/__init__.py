"""Platoon overtaking testbed: NoisyNet multi-agent DQN on a two-lane highway."""

__version__ = "0.1.0"
