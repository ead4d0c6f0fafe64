"""Skeletal-transformer inverse kinematics toolkit."""
__version__ = "0.1.0"
