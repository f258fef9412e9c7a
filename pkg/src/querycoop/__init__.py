"""Object-query cooperative perception on a from-scratch numpy autodiff kernel."""

__version__ = "0.1.0"
