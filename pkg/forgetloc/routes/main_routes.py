from fastapi import APIRouter

from forgetloc.models.schemas import APIResponse, HealthResponse
from forgetloc.services import data_service, health_service

router = APIRouter()


@router.get("/health", response_model=HealthResponse)
async def health_check():
    """Liveness plus what is on disk: cached datasets and stored experiments"""
    health_data = health_service.get_health_status()
    data_status = health_data.get("data", {})
    results_status = health_data.get("results", {})

    return HealthResponse(
        status=health_data.get("status", "unknown"),
        version=health_data.get("version", "unknown"),
        uptime=health_data.get("uptime"),
        datasets_cached=data_status.get("cached_sources", []),
        experiments=results_status.get("experiments", 0),
    )


@router.get("/status")
async def get_status():
    """Uptime, server settings and host description"""
    return APIResponse(success=True, message="Application is running",
                       data=health_service.get_system_status())


@router.get("/config")
async def get_config():
    """Experiment defaults and directories"""
    return APIResponse(success=True, message="Configuration retrieved",
                       data=health_service.get_config_status())


@router.get("/datasets")
async def get_datasets():
    """Dataset cache: which sources are on disk and which splits are loaded"""
    stats = data_service.get_data_stats()
    message = f"{len(stats['cached_sources'])} dataset source(s) cached"
    return APIResponse(success=True, message=message, data=stats)
