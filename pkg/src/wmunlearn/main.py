#!/usr/bin/env python3
"""
wmunlearn MCP Server - Main Entry Point
Model Context Protocol server exposing watermark metrics, theory checks and attack runs.
"""

import asyncio
import os
import sys

# Ensure package is importable whether run directly or via run_server.py
_root = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", ".."))
_src = os.path.join(_root, "src")
if _src not in sys.path:
    sys.path.insert(0, _src)

from mcp.server import Server
from mcp.server.stdio import stdio_server
from mcp.types import Tool

from wmunlearn.config import RUN_ROOT
from wmunlearn.utils import create_error_response, setup_logging
from wmunlearn.tools import (
    get_metrics_tools,
    handle_metrics_tool,
    get_theory_tools,
    handle_theory_tool,
    get_pipeline_tools,
    handle_pipeline_tool,
)

# Initialize MCP server
server = Server("wmunlearn-mcp-server")

METRICS_TOOLS = {
    "WMUNLEARN_RESCALE_ACCURACY",
    "WMUNLEARN_ATTACK_SUCCESS",
}
THEORY_TOOLS = {
    "WMUNLEARN_OPTIMAL_ETA",
    "WMUNLEARN_VERIFY_DISCREPANCY",
}
PIPELINE_TOOLS = {
    "WMUNLEARN_RUN_ATTACK",
    "WMUNLEARN_GET_REPORT",
}


@server.list_tools()
async def list_tools() -> list[Tool]:
    """List all available wmunlearn tools."""
    tools = []
    tools.extend(get_metrics_tools())
    tools.extend(get_theory_tools())
    tools.extend(get_pipeline_tools())
    return tools


@server.call_tool()
async def call_tool(name: str, arguments: dict) -> list:
    """Handle tool execution requests."""
    if name in METRICS_TOOLS:
        return await handle_metrics_tool(name, arguments)
    if name in THEORY_TOOLS:
        return await handle_theory_tool(name, arguments)
    if name in PIPELINE_TOOLS:
        return await handle_pipeline_tool(name, arguments)
    return create_error_response(f"Unknown tool: {name}")


async def main():
    """Main entry point for the MCP server."""
    setup_logging()
    if not os.path.isdir(RUN_ROOT):
        print(
            f"Info: run root {RUN_ROOT} does not exist yet; it is created on the first attack run.",
            file=sys.stderr,
        )

    # Run the server using stdio transport
    async with stdio_server() as (read_stream, write_stream):
        await server.run(
            read_stream,
            write_stream,
            server.create_initialization_options(),
        )


if __name__ == "__main__":
    asyncio.run(main())
