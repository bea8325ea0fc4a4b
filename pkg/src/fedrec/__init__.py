"""Fading-channel symbol detection with federated training."""
