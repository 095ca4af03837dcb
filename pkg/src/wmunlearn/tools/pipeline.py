"""Attack run tools: launch a configured pipeline run and read its report."""

import asyncio
import json
import os
from typing import Any, Sequence

from mcp.types import Tool

from ..config import RUN_ROOT
from ..errors import ConfigError, StageError, WmUnlearnError
from ..metrics import read_report_json
from ..pipeline import run_pipeline
from ..runconfig import load_run_config
from ..utils import create_error_response, create_success_response


def get_pipeline_tools() -> list[Tool]:
    """Get all pipeline tools."""
    return [
        Tool(
            name="WMUNLEARN_RUN_ATTACK",
            description=(
                "Run the full embed, recover, detect, split and unlearn pipeline for one seed of a YAML "
                "config. Writes a new run directory under WMUNLEARN_RUN_ROOT and returns its report."
            ),
            inputSchema={
                "type": "object",
                "properties": {
                    "config_path": {"type": "string", "description": "Path to the YAML run config"},
                    "seed": {"type": "integer", "description": "Seed (defaults to the config's first seed)"},
                    "scheme": {
                        "type": "string",
                        "description": "Override the watermark scheme",
                        "enum": ["content", "noise", "unrelated", "abstract_ood", "mislabeled"],
                    },
                    "setting": {
                        "type": "string",
                        "description": "Override the data setting",
                        "enum": ["in-distribution", "transfer", "data-free"],
                    },
                },
                "required": ["config_path"],
            },
        ),
        Tool(
            name="WMUNLEARN_GET_REPORT",
            description="Read the report and manifest of a finished run directory.",
            inputSchema={
                "type": "object",
                "properties": {
                    "run_dir": {"type": "string", "description": "Run directory (absolute, or relative to the run root)"},
                },
                "required": ["run_dir"],
            },
        ),
    ]


async def handle_pipeline_tool(name: str, arguments: dict[str, Any]) -> Sequence:
    """Handle pipeline tool execution."""
    if name == "WMUNLEARN_RUN_ATTACK":
        return await run_attack(arguments)
    elif name == "WMUNLEARN_GET_REPORT":
        return await get_report(arguments)
    raise ValueError(f"Unknown pipeline tool: {name}")


async def run_attack(arguments: dict[str, Any]) -> Sequence:
    config_path = arguments.get("config_path")
    if not config_path:
        return create_error_response("config_path is required")
    try:
        cfg = load_run_config(config_path).with_overrides(scheme=arguments.get("scheme"), setting=arguments.get("setting"))
    except ConfigError as e:
        return create_error_response(f"Invalid config: {e}")
    seed = int(arguments.get("seed", cfg.seeds[0]))
    try:
        path, reports = await asyncio.to_thread(run_pipeline, cfg, seed)
    except StageError as e:
        return create_error_response(str(e), {"stage": e.stage, "run_dir": getattr(e, "run_dir", None)})
    return create_success_response({"run_dir": path, "reports": [r.to_dict() for r in reports]})


async def get_report(arguments: dict[str, Any]) -> Sequence:
    run_dir = arguments.get("run_dir")
    if not run_dir:
        return create_error_response("run_dir is required")
    if not os.path.isabs(run_dir):
        run_dir = os.path.join(RUN_ROOT, run_dir)
    report_path = os.path.join(run_dir, "report.json")
    if not os.path.exists(report_path):
        failed = os.path.exists(os.path.join(run_dir, "FAILED"))
        return create_error_response("Run has no report" + (" (run failed)" if failed else ""), {"run_dir": run_dir})
    try:
        extra, reports = read_report_json(report_path)
        manifest = None
        manifest_path = os.path.join(run_dir, "manifest.json")
        if os.path.exists(manifest_path):
            with open(manifest_path) as f:
                manifest = json.load(f)
    except (OSError, json.JSONDecodeError, WmUnlearnError) as e:
        return create_error_response(f"Unreadable run directory: {e}", {"run_dir": run_dir})
    return create_success_response({
        "run_dir": run_dir,
        **extra,
        "reports": [r.to_dict() for r in reports],
        "manifest": manifest,
    })
