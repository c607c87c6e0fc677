import logging
from typing import Any, Mapping, Optional

__version__ = "0.3.0"

logger = logging.getLogger(__name__)


def create_config(config_file: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None):
    """
    Create the pipeline configuration.

    Built-in defaults, then the JSON config file, then explicit overrides
    (command-line flags). None values in overrides are ignored.
    """
    from rarevar.models.caller import PipelineConfig
    from rarevar.utils.validation import load_json_document

    settings = PipelineConfig().to_dict()

    if config_file:
        # Load the config file if passed in
        settings.update(load_json_document(config_file))
        logger.debug(f"Loaded configuration from {config_file}")

    if overrides:
        settings.update({k: v for k, v in overrides.items() if v is not None})

    return PipelineConfig.from_dict(settings)
