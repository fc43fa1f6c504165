"""Texture-matching visual servoing: learned pose regression, procedural
scene simulation, dual-arm impedance control and a closed-loop plant."""

__version__ = "0.1.0"
