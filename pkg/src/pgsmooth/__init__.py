"""Physics-guided smoothing of DIC displacement fields."""
