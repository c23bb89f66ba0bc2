import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

from components import dependencies
from components.adaptive_config import AdaptiveRunConfig
from components.dose_engine import DoseKernelConfig
from components.exceptions import ConfigError, ContractError, PhantomConstructionError
from components.moea_core import OptimizerConfig
from components.objective_model import ConstraintConfig, ProtocolConfig, protocol_from_dict
from components.patient_model import PhantomSpec, phantom_spec_from_dict

# Initialize logger
logger = dependencies.setup_logging()
logger = logging.getLogger('app.config_utils')

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"
PROTOCOL_FILE = CONFIG_DIR / "protocol.json"
OPTIMIZER_FILE = CONFIG_DIR / "optimizer.json"
PHANTOM_PRESETS_FILE = CONFIG_DIR / "phantom_presets.json"


@dataclass(frozen=True)
class OptimizerSettings:
    optimizer: OptimizerConfig
    adaptive: AdaptiveRunConfig
    constraints: ConstraintConfig
    kernel: DoseKernelConfig


def get_config(path: str) -> Dict[str, Any]:
    """
    Load and parse configuration data from a JSON file.

    Args:
        path (str): Path to the JSON configuration file.

    Returns:
        Dict[str, Any]: A dictionary containing the parsed configuration data.
    """
    try:
        # Validate input parameter
        if not isinstance(path, (str, Path)) or not str(path).strip():
            logger.error("Path must be a non-empty string")
            return None

        # Open and read the JSON configuration file
        with open(path, "r") as config_file:
            config = json.load(config_file)

        if not isinstance(config, dict):
            logger.error(f"Configuration file {path} must contain a JSON object")
            return None
        return config

    except FileNotFoundError as fnf_error:
        logger.error(f"Configuration file not found - {fnf_error}")
        return None
    except json.JSONDecodeError as json_error:
        logger.error(f"Invalid JSON format in config file - {json_error}")
        return None
    except ValueError as ve:
        logger.error(f"Invalid input or data format - {ve}")
        return None
    except Exception as e:
        logger.error(f"Failed to load configuration - {e}")
        return None


def load_protocol(path: Optional[str] = None) -> ProtocolConfig:
    """
    Load the aim protocol.

    Args:
        path (Optional[str]): Protocol JSON file; the bundled config/protocol.json when None.

    Returns:
        ProtocolConfig: The parsed protocol, or None when the file is missing or invalid.
    """
    source = path if path is not None else str(PROTOCOL_FILE)
    data = get_config(source)
    if data is None:
        return None
    try:
        protocol = protocol_from_dict(data)
        logger.info(f"Loaded protocol from {source}: {len(protocol.embrace_aims)} base aims, "
                    f"{len(protocol.added_aims)} added aims")
        return protocol
    except ConfigError as ce:
        logger.error(f"Invalid protocol in {source} - {ce}")
        return None


def load_optimizer_settings(path: Optional[str] = None) -> OptimizerSettings:
    """
    Load optimizer, adaptive-loop, constraint and kernel settings.

    Missing sections fall back to the dataclass defaults.

    Args:
        path (Optional[str]): Settings JSON file; the bundled config/optimizer.json when None.

    Returns:
        OptimizerSettings: The four typed configurations, or None on error.
    """
    source = path if path is not None else str(OPTIMIZER_FILE)
    data = get_config(source)
    if data is None:
        return None
    try:
        settings = OptimizerSettings(
            optimizer=OptimizerConfig(**data.get("optimizer", {})),
            adaptive=AdaptiveRunConfig(**data.get("adaptive", {})),
            constraints=ConstraintConfig(**data.get("constraints", {})),
            kernel=DoseKernelConfig(**data.get("kernel", {})),
        )
        return settings
    except TypeError as te:
        logger.error(f"Unknown setting in {source} - {te}")
        return None
    except (ConfigError, ContractError) as ce:
        logger.error(f"Invalid optimizer settings in {source} - {ce}")
        return None


def load_phantom_presets(path: Optional[str] = None) -> Dict[str, PhantomSpec]:
    """
    Load named phantom presets.

    Args:
        path (Optional[str]): Presets JSON file; the bundled config/phantom_presets.json when None.

    Returns:
        Dict[str, PhantomSpec]: Presets keyed by name, or None on error.
    """
    source = path if path is not None else str(PHANTOM_PRESETS_FILE)
    data = get_config(source)
    if data is None:
        return None
    try:
        presets = {name: phantom_spec_from_dict(raw) for name, raw in data.items()}
        logger.debug(f"Loaded phantom presets {sorted(presets)} from {source}")
        return presets
    except (KeyError, TypeError, ValueError, PhantomConstructionError) as e:
        logger.error(f"Invalid phantom preset in {source} - {e}")
        return None
