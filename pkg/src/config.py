"""
Application Configuration
"""
import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Development Settings
# DEBUG_MODE can be set via environment variable CUBEFLOW_DEBUG (true/false)
# Defaults to False if not set
DEBUG_MODE = os.getenv('CUBEFLOW_DEBUG', 'false').lower() in ('true', '1', 'yes')

# Log level for the stderr and run/log.txt sinks; DEBUG_MODE forces DEBUG
DEFAULT_LOG_LEVEL = 'DEBUG' if DEBUG_MODE else os.getenv('CUBEFLOW_LOG_LEVEL', 'INFO').upper()

# Worker threads per rank when neither the case file nor --threads sets one
DEFAULT_THREADS = max(1, int(os.getenv('CUBEFLOW_THREADS', '1')))

# Output root for run/{forces.csv, balance.csv, checkpoints/, log.txt}
DEFAULT_RUN_DIR = os.getenv('CUBEFLOW_RUN_DIR', 'run')
