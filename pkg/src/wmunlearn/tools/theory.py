"""Gaussian-mixture smoothness tools."""

from typing import Any, Sequence

from mcp.types import Tool

from ..errors import WmUnlearnError
from ..theory import MixtureSpec, WatermarkSpec, optimal_eta, risk, stationarity_residual, verify_discrepancy
from ..utils import create_error_response, create_success_response

_NUMBER = {"type": "number"}


def get_theory_tools() -> list[Tool]:
    """Get all theory tools."""
    return [
        Tool(
            name="WMUNLEARN_OPTIMAL_ETA",
            description=(
                "Risk-minimizing offset eta* of the linear classifier on a two-class Gaussian mixture "
                "centered at +1/-1, with its risk and scaled stationarity residual."
            ),
            inputSchema={
                "type": "object",
                "properties": {
                    "sigma_pos": {**_NUMBER, "description": "Std of the positive class"},
                    "sigma_neg": {**_NUMBER, "description": "Std of the negative class"},
                    "alpha": {**_NUMBER, "description": "Prior of the positive class, in (0, 1)"},
                    "d": {"type": "integer", "description": "Dimension"},
                },
                "required": ["sigma_pos", "sigma_neg", "alpha", "d"],
            },
        ),
        Tool(
            name="WMUNLEARN_VERIFY_DISCREPANCY",
            description=(
                "Check whether a watermarked positive class is smoother (input and parameter noise) than the "
                "negative class: closed forms, Monte Carlo estimates and the sufficient conditions."
            ),
            inputSchema={
                "type": "object",
                "properties": {
                    "d": {"type": "integer", "description": "Dimension"},
                    "mu_pos": {**_NUMBER, "description": "Positive class mean (per coordinate)"},
                    "mu_neg": {**_NUMBER, "description": "Negative class mean (per coordinate)"},
                    "mu_wm": {**_NUMBER, "description": "Watermark data mean (per coordinate)"},
                    "sigma": {**_NUMBER, "description": "Std of normal data"},
                    "sigma_wm": {**_NUMBER, "description": "Std of watermark data"},
                    "p": {**_NUMBER, "description": "Watermark ratio relative to the whole dataset"},
                    "sigma_input": {**_NUMBER, "description": "Input noise std (canonical coordinates)"},
                    "sigma_param": {**_NUMBER, "description": "Parameter noise std"},
                    "w1": {**_NUMBER, "description": "Shared weight of the linear model", "default": 1.0},
                    "draws": {"type": "integer", "description": "Monte Carlo draws (0 to skip)", "default": 20000},
                    "seed": {"type": "integer", "description": "Monte Carlo seed", "default": 0},
                },
                "required": ["d", "mu_pos", "mu_neg", "mu_wm", "sigma", "sigma_wm", "p", "sigma_input", "sigma_param"],
            },
        ),
    ]


async def handle_theory_tool(name: str, arguments: dict[str, Any]) -> Sequence:
    """Handle theory tool execution."""
    if name == "WMUNLEARN_OPTIMAL_ETA":
        return await eta(arguments)
    elif name == "WMUNLEARN_VERIFY_DISCREPANCY":
        return await discrepancy(arguments)
    raise ValueError(f"Unknown theory tool: {name}")


async def eta(arguments: dict[str, Any]) -> Sequence:
    try:
        spec = MixtureSpec(int(arguments["d"]), float(arguments["sigma_pos"]), float(arguments["sigma_neg"]), float(arguments["alpha"]))
        value = optimal_eta(spec.sigma_pos, spec.sigma_neg, spec.alpha, spec.d)
    except KeyError as e:
        return create_error_response(f"Missing argument: {e.args[0]}")
    except (TypeError, ValueError, WmUnlearnError) as e:
        return create_error_response(str(e), {"arguments": arguments})
    return create_success_response({"eta": value, "risk": risk(value, spec), "residual": stationarity_residual(value, spec)})


async def discrepancy(arguments: dict[str, Any]) -> Sequence:
    try:
        spec = WatermarkSpec(
            d=int(arguments["d"]),
            mu_pos=float(arguments["mu_pos"]),
            mu_neg=float(arguments["mu_neg"]),
            mu_wm=float(arguments["mu_wm"]),
            sigma=float(arguments["sigma"]),
            sigma_wm=float(arguments["sigma_wm"]),
            p=float(arguments["p"]),
        )
        report = verify_discrepancy(
            spec,
            float(arguments["sigma_input"]),
            float(arguments["sigma_param"]),
            draws=int(arguments.get("draws", 20000)),
            seed=int(arguments.get("seed", 0)),
            w1=float(arguments.get("w1", 1.0)),
        )
    except KeyError as e:
        return create_error_response(f"Missing argument: {e.args[0]}")
    except (TypeError, ValueError, WmUnlearnError) as e:
        return create_error_response(str(e), {"arguments": arguments})
    return create_success_response({**report.to_dict(), "mc_consistent": report.mc_consistent()})
