"""Dataset generation, two-stage training, checkpoints, sampling and the CLI."""
