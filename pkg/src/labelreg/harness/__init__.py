"""Experiment harness: metrics, checkpoints, configs, batteries, CLI."""
