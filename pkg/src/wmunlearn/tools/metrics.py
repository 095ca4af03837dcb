"""Rescaled watermark accuracy and success-criterion tools."""

from typing import Any, Sequence

from mcp.types import Tool

from ..errors import WmUnlearnError
from ..metrics import AttackReport, attack_success, rescaled_accuracy
from ..utils import create_error_response, create_success_response


def get_metrics_tools() -> list[Tool]:
    """Get all metric tools."""
    return [
        Tool(
            name="WMUNLEARN_RESCALE_ACCURACY",
            description=(
                "Linearly rescale a watermark accuracy so the decision threshold theta maps to theta_prime "
                "(default 0.5) and 1 maps to 1."
            ),
            inputSchema={
                "type": "object",
                "properties": {
                    "x": {"type": "number", "description": "Watermark accuracy in [0, 1]"},
                    "theta": {"type": "number", "description": "Decision threshold in [0, 1)"},
                    "theta_prime": {"type": "number", "description": "Rescaled threshold", "default": 0.5},
                },
                "required": ["x", "theta"],
            },
        ),
        Tool(
            name="WMUNLEARN_ATTACK_SUCCESS",
            description=(
                "Decide whether a removal attack succeeded: rescaled watermark accuracy below 0.5 "
                "and at least 90% of the original clean accuracy kept."
            ),
            inputSchema={
                "type": "object",
                "properties": {
                    "clean_before": {"type": "number", "description": "Clean accuracy of the watermarked model"},
                    "clean_after": {"type": "number", "description": "Clean accuracy after the attack"},
                    "rescaled": {"type": "number", "description": "Rescaled watermark accuracy after the attack"},
                },
                "required": ["clean_before", "clean_after", "rescaled"],
            },
        ),
    ]


async def handle_metrics_tool(name: str, arguments: dict[str, Any]) -> Sequence:
    """Handle metric tool execution."""
    if name == "WMUNLEARN_RESCALE_ACCURACY":
        return await rescale(arguments)
    elif name == "WMUNLEARN_ATTACK_SUCCESS":
        return await success(arguments)
    raise ValueError(f"Unknown metrics tool: {name}")


async def rescale(arguments: dict[str, Any]) -> Sequence:
    try:
        x = float(arguments["x"])
        theta = float(arguments["theta"])
        theta_prime = float(arguments.get("theta_prime", 0.5))
        value = rescaled_accuracy(x, theta, theta_prime)
    except KeyError as e:
        return create_error_response(f"Missing argument: {e.args[0]}")
    except (TypeError, ValueError, WmUnlearnError) as e:
        return create_error_response(str(e), {"arguments": arguments})
    return create_success_response({"x": x, "theta": theta, "theta_prime": theta_prime, "rescaled": value})


async def success(arguments: dict[str, Any]) -> Sequence:
    try:
        report = AttackReport(
            scheme="", attack="", setting="", seed=0,
            clean_before=float(arguments["clean_before"]),
            clean_after=float(arguments["clean_after"]),
            wm_before=0.0, wm_after=0.0, theta=0.0,
            rescaled_after=float(arguments["rescaled"]),
        )
    except KeyError as e:
        return create_error_response(f"Missing argument: {e.args[0]}")
    except (TypeError, ValueError) as e:
        return create_error_response(str(e), {"arguments": arguments})
    kept = report.clean_after / report.clean_before if report.clean_before else None
    return create_success_response({
        "success": attack_success(report),
        "watermark_removed": report.rescaled_after < 0.5,
        "utility_kept": kept,
    })
