"""Reference-anchored self-play for tokenized traffic agents."""

__version__ = "0.1.0"

RUN_CONFIG_NAME = "run_config.json"
