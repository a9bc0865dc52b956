from fastapi import APIRouter, HTTPException, Query
from fastapi.responses import Response

import aiofiles

from forgetloc.models.schemas import APIResponse, FigureMode
from forgetloc.services import results_service
from forgetloc.services.report_service import emit_figure
from forgetloc.utils.logger import logger

router = APIRouter()

@router.get("", response_model=APIResponse)
async def list_experiments():
    """List stored experiments"""
    experiments = results_service.list_experiments()

    return APIResponse(
        success=True,
        message=f"Retrieved {len(experiments)} experiments",
        data=[e.model_dump(mode="json") for e in experiments]
    )

@router.get("/{experiment_id}/manifest", response_model=APIResponse)
async def get_manifest(experiment_id: str):
    """Get the run manifest of one experiment"""
    data = results_service.get_manifest(experiment_id)
    if data is None:
        raise HTTPException(status_code=404, detail=f"Experiment {experiment_id} not found")

    return APIResponse(
        success=True,
        message="Manifest retrieved successfully",
        data=data
    )

@router.get("/{experiment_id}/runs", response_model=APIResponse)
async def get_runs(experiment_id: str):
    """Get every run result of one experiment"""
    runs = results_service.get_runs(experiment_id)
    if runs is None:
        raise HTTPException(status_code=404, detail=f"Experiment {experiment_id} not found")

    return APIResponse(
        success=True,
        message=f"Retrieved {len(runs)} runs",
        data=runs
    )

@router.get("/{experiment_id}/stats", response_model=APIResponse)
async def get_stats(
    experiment_id: str,
    transition: int = Query(0, ge=0, description="Task transition index")
):
    """Per-block statistics over all runs of one experiment"""
    stats = results_service.get_stats(experiment_id, transition)
    if stats is None:
        raise HTTPException(status_code=404, detail=f"Experiment {experiment_id} not found")

    return APIResponse(
        success=True,
        message=f"Statistics over {stats.run_count} runs",
        data=stats.model_dump(mode="json")
    )

@router.get("/{experiment_id}/figure")
async def get_figure(
    experiment_id: str,
    mode: FigureMode = Query(FigureMode.SUM, description="sum or mean per element"),
    transition: int = Query(0, ge=0, description="Task transition index")
):
    """Bar chart of the per-block contributions as SVG"""
    folder = results_service.experiment_dir(experiment_id)
    stats = results_service.get_stats(experiment_id, transition)
    if folder is None or stats is None:
        raise HTTPException(status_code=404, detail=f"Experiment {experiment_id} not found")

    path = folder / f"figure_t{transition}_{mode.value}.svg"
    if not path.exists():
        logger.info(f"Rendering {path.name} for {experiment_id}")
        emit_figure(stats, mode, path)
    async with aiofiles.open(path, "rb") as handle:
        content = await handle.read()
    return Response(content=content, media_type="image/svg+xml")
