# Services Package

from .data_service import data_service, DataService
from .results_service import results_service, ResultsService
from .health_service import health_service, HealthService

__all__ = [
    "data_service",
    "DataService",
    "results_service",
    "ResultsService",
    "health_service",
    "HealthService"
]
