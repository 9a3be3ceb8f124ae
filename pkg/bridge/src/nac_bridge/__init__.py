"""Feature-extraction bridge: real audio -> codec features -> EPF1 files.

Write-only by design: the endpointer toolkit consumes the produced files
through its documented EPF1 format, never through a runtime import in
either direction.
"""

__version__ = "0.1.0"
