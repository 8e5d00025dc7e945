# parablock configuration
# Defaults for every command; override with the PARABLOCK_* environment variables

import os

# Debug mode turns on per-step loss logging and full tracebacks in the CLI
DEBUG_MODE = os.environ.get("PARABLOCK_DEBUG", "0").lower() in ("1", "true", "yes")

LOG_LEVEL = os.environ.get("PARABLOCK_LOG_LEVEL", "DEBUG" if DEBUG_MODE else "INFO").upper()
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Packed shards land here when `pack` gets no --output
CACHE_DIR = os.path.expanduser(os.environ.get("PARABLOCK_CACHE_DIR", "~/.cache/parablock"))

_HERE = os.path.dirname(os.path.abspath(__file__))
RULES_DIR = os.path.join(_HERE, "rules")
PLANS_DIR = os.path.join(_HERE, "plans")

DEFAULT_SEED = 0
DEFAULT_SCALE = 1e-6  # 4500 GT -> 4.5M tokens
DEFAULT_WORKERS = 1

# 1 GT = 1e9 tokens
GIGATOKEN = 1_000_000_000
