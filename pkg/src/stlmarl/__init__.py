"""Temporal-logic tasks for multi-agent RL.

Subpackages cover the pipeline end to end: formula monitoring (``stl``),
the landmark world (``world``), a small reverse-mode tensor library
(``tensor``), the transformer policy (``model``), training (``trainer``),
statistical verification (``verify``), and the command line (``cli``).
"""

__version__ = "0.1.0"
