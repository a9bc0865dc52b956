import os
from pathlib import Path
from typing import List
from pydantic_settings import BaseSettings, SettingsConfigDict

from forgetloc.utils.logger import logger

from forgetloc.models.schemas import (
    AppConfig, DataSource, FetchConfig, OptimizerKind, PathIntegralConfig,
    Quadrature, TrackingWindow, TrainConfig
)


class AppSettings(BaseSettings):
    """
    Application settings with structured configuration
    """

    # Application Configuration
    app_name: str = "forgetloc"
    app_version: str = "0.1.0"
    debug: bool = False
    host: str = "127.0.0.1"
    reload: bool = False
    port: int = 8000

    # Directories
    base_dir: Path = Path(__file__).resolve().parent.parent.parent
    data_dir: Path = base_dir / "data"
    results_dir: Path = base_dir / "results"

    # Dataset mirrors (hosts move, so these are config and not constants)
    mnist_mirror: str = "https://storage.googleapis.com/cvdf-datasets/mnist/"
    fashion_mnist_mirror: str = "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/"
    fetch_timeout: float = 60.0

    # Training defaults
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    optimizer: OptimizerKind = OptimizerKind.ADAM
    runs: int = 10

    # Path integral defaults
    quadrature: Quadrature = Quadrature.TRAPEZOID
    substeps: int = 1
    eval_set_size: int = 1024
    tracking_window: TrackingWindow = TrackingWindow.FULL

    # CORS
    cors_origins: List[str] = ["*"]

    # Logging Configuration
    log_dir: Path = base_dir / "logs"
    log_level: str = "INFO"   # could be "DEBUG" / "WARNING" / "ERROR"
    log_to_file: bool = False
    log_complete_file: str = "complete.log"
    log_session_prefix: str = "session"

    # Config for env files
    model_config = SettingsConfigDict(
        env_file=(".env", ".env.local"),
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore"
    )


    def print_settings_summary(self):
        logger.info("Application Settings Summary:")
        for key, value in self.model_dump().items():
            logger.info(f"{key}: {value}")


    def get_app_config(self) -> AppConfig:
        """Get application configuration"""
        return AppConfig(
            name=self.app_name,
            version=self.app_version,
            debug=self.debug,
            host=self.host,
            port=self.port,
            reload=self.reload
        )


    def get_train_config(self) -> TrainConfig:
        """Get default training configuration"""
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.learning_rate,
            beta1=self.adam_beta1,
            beta2=self.adam_beta2,
            epsilon=self.adam_epsilon,
            optimizer=self.optimizer
        )


    def get_path_config(self) -> PathIntegralConfig:
        """Get default path integral configuration"""
        return PathIntegralConfig(
            quadrature=self.quadrature,
            substeps=self.substeps,
            eval_set_size=self.eval_set_size,
            window=self.tracking_window
        )


    def get_fetch_config(self) -> FetchConfig:
        """Get dataset download configuration"""
        return FetchConfig(
            cache_dir=str(self.data_dir),
            mirrors={
                DataSource.MNIST: self.mnist_mirror,
                DataSource.FASHION_MNIST: self.fashion_mnist_mirror,
            },
            timeout=self.fetch_timeout
        )


# Create global settings instance
app_settings = AppSettings()


# ============================================================================
# UTILITY FUNCTIONS
# ============================================================================

def validate_settings() -> bool:
    """Validate that the configured directories are usable"""
    errors = []

    if not app_settings.data_dir.exists():
        errors.append(f"Data directory does not exist: {app_settings.data_dir}")
    elif not os.access(app_settings.data_dir, os.W_OK):
        errors.append(f"Data directory is not writable: {app_settings.data_dir}")

    if app_settings.results_dir.exists() and not os.access(app_settings.results_dir, os.W_OK):
        errors.append(f"Results directory is not writable: {app_settings.results_dir}")

    if errors:
        logger.warning("Configuration errors:")
        for error in errors:
            logger.warning(f"  - {error}")
        return False

    return True
