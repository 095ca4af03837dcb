"""wmunlearn MCP Tools - Organized by functionality."""

from .metrics import get_metrics_tools, handle_metrics_tool
from .theory import get_theory_tools, handle_theory_tool
from .pipeline import get_pipeline_tools, handle_pipeline_tool

__all__ = [
    "get_metrics_tools",
    "handle_metrics_tool",
    "get_theory_tools",
    "handle_theory_tool",
    "get_pipeline_tools",
    "handle_pipeline_tool",
]
