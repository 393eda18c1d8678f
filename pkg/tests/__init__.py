"""Test suite for mpc_tune package."""
