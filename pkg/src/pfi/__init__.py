"""Information-flow control for tool-calling LLM agents."""

from .agent import VARIANTS, RunResult, SessionConfig, run_session

__version__ = "0.1.0"

__all__ = ["VARIANTS", "RunResult", "SessionConfig", "run_session", "__version__"]
