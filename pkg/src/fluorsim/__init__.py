"""Forward simulator for spin detection by microwave photon counting."""
__version__ = "0.1.0"
