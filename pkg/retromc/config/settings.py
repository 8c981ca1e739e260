from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Optional, Dict, Any
import yaml
import os

CONFIG_PATH = os.path.join(os.path.dirname(os.path.dirname(os.path.dirname(__file__))), 'config.yaml')


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="RETROMC_",
        env_file=".env.local",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Service configuration
    service_name: str = "retromc"
    service_version: str = "1.0.0"

    # Run defaults
    default_seed: int = 42
    default_workers: int = 1
    retry_cap: int = 10_000_000

    # Logging
    log_level: str = "INFO"

    # Engine defaults - loaded from config.yaml
    engine_config: Optional[Dict[str, Any]] = None

    # Versioned reference values and tolerances - loaded from config.yaml
    tolerance_manifest: Optional[Dict[str, Any]] = None

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self._load_yaml_sections()

    def _load_yaml_sections(self, path: Optional[str] = None):
        """Load engine defaults and the tolerance manifest from config.yaml"""
        config_path = path or CONFIG_PATH
        try:
            if os.path.exists(config_path):
                with open(config_path, 'r') as f:
                    config = yaml.safe_load(f) or {}
                self.engine_config = config.get('retromc', {})
                self.tolerance_manifest = config.get('tolerances', {})
            else:
                self.engine_config = {}
                self.tolerance_manifest = {}
        except Exception:
            # Fall back to empty sections if loading fails
            self.engine_config = {}
            self.tolerance_manifest = {}

    def engine_default(self, section: str, key: str, fallback: Any = None) -> Any:
        return (self.engine_config or {}).get(section, {}).get(key, fallback)

    def table_manifest(self, table_id: str) -> Dict[str, Any]:
        return (self.tolerance_manifest or {}).get(table_id, {})

    @property
    def ci_z(self) -> float:
        return float((self.tolerance_manifest or {}).get("ci_z", 1.96))


settings = Settings()
