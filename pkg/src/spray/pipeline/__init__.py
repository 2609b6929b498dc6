"""Config-driven analysis pipeline with per-stage caching."""

from .config import (
    ConfigError,
    PipelineConfig,
    apply_overrides,
    dump_config,
    load_config,
    parse_config_text,
)
from .runner import (
    STAGES,
    Pipeline,
    PipelineResult,
    StageCache,
    StageError,
    file_digest,
    load_class_outputs,
    load_ranking,
    run_pipeline,
    stage_exit_code,
)
