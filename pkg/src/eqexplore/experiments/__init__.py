"""Scenario configs, seeded trials and the command line runner."""
