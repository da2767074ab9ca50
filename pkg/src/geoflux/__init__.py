"""Distance decay and country preference in collaboration and citation networks."""

__version__ = "0.1.0"
