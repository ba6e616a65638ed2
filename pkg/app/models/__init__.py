"""Models module initialization."""
