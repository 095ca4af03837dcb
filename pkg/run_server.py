#!/usr/bin/env python3
"""
Launch the wmunlearn MCP server over stdio.

    python run_server.py [RUN_ROOT]

An optional positional RUN_ROOT overrides WMUNLEARN_RUN_ROOT for this process,
so attack runs started through the server land there.
"""

import asyncio
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "src"))

if __name__ == "__main__":
    if len(sys.argv) > 1:
        # Must be set before wmunlearn.config is imported
        os.environ["WMUNLEARN_RUN_ROOT"] = os.path.abspath(sys.argv[1])

    from wmunlearn.main import main

    asyncio.run(main())
