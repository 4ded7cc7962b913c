"""Fisher markets with per-agent linear constraints."""
