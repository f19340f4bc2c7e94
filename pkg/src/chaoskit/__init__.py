"""Toolkit for classical Hamiltonian chaos: maps, billiards, periodic orbits,
symbolic dynamics, homoclinic tangles, and complexified trajectories."""

__version__ = "0.1.0"
