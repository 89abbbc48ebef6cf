"""Multi-agent construction of tabular data pipelines."""
from .agents import FinalResult, Pipeline, load_task, run_pipeline
from .config import RunConfig, resolve_config
from .gateway import LiveBackend, Playbook, ScriptedBackend
from .model import TaskSpec

__version__ = "0.1.0"

__all__ = ["Pipeline", "FinalResult", "run_pipeline", "load_task", "RunConfig", "resolve_config",
           "Playbook", "ScriptedBackend", "LiveBackend", "TaskSpec", "__version__"]
