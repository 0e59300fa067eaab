"""Reference simulators for the stless wire protocol."""

from .protocol import SimManifest, serve
from . import echo, unicycle

__version__ = "0.1.0"
