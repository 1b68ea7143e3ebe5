"""Two-stage hierarchical beta regression of anthropogenic and biological sound."""

__version__ = "0.1.0"

TIMES_OF_DAY = ("morning", "afternoon", "evening")
N_TIMES = 3
N_MINUTES = 29
