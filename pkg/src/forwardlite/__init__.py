"""forwardlite: a miniature declarative Ajax web framework.

Pages are rendered queries over a unified application state; user actions
are stored procedures; the framework keeps the browser in sync by shipping
minimal data deltas.
"""

__version__ = "0.1.0"
