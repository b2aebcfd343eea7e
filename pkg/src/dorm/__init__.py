"""Domain adaptation optimized for robustness in mixture populations."""
