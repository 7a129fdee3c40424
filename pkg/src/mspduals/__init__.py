"""Primal and dual SDDP for multistage stochastic linear programs."""
