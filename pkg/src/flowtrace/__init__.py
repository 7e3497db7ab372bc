"""Flow-stable traceroute probing, route-structure analysis and a network simulator."""

from .wire import FlowKey, Mode, Protocol

__all__ = ["FlowKey", "Mode", "Protocol"]
__version__ = "0.1.0"
