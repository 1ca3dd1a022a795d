"""Grounded situation recognition with alternate verb/noun refinement."""
