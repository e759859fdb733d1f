"""Echo state networks with efficient time-series cross-validation."""
