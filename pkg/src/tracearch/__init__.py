"""Toolkit for recovering DNN architectures from side-channel traces."""

__version__ = "0.1.0"
