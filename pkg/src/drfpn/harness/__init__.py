"""Command-line harness: synthetic data, toy training, evaluation, persistence, checks and timing."""
