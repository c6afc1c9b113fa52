"""Simulation services (lattice, Hamiltonian, CCE, dynamics, analysis, runner)."""
