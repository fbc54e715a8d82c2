"""Delayed vehicle teleoperation simulator (successive reference pose tracking)."""
