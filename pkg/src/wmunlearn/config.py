"""Environment configuration for wmunlearn."""

import os
from dotenv import load_dotenv

# Load .env from project root (parent of src/wmunlearn)
_config_dir = os.path.dirname(os.path.abspath(__file__))
_project_root = os.path.abspath(os.path.join(_config_dir, "..", ".."))
load_dotenv(os.path.join(_project_root, ".env"))


def _flag(value: str) -> bool:
    return value.strip().lower() in {"1", "true", "yes", "on"}


# Run directories and dataset cache
RUN_ROOT = os.getenv("WMUNLEARN_RUN_ROOT", os.path.join(_project_root, "runs"))
DATA_DIR = os.getenv("WMUNLEARN_DATA_DIR", os.path.join(_project_root, "data"))

# Gzip IDX mirror used by fetch_mnist
MNIST_URL = os.getenv("WMUNLEARN_MNIST_URL", "https://storage.googleapis.com/cvdf-datasets/mnist/")

LOG_LEVEL = os.getenv("WMUNLEARN_LOG_LEVEL", "INFO")
PROGRESS = _flag(os.getenv("WMUNLEARN_PROGRESS", "0"))
WORKERS = int(os.getenv("WMUNLEARN_WORKERS", "1"))
