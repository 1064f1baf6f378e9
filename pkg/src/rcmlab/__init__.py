"""Random conductance model laboratory."""
