from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from contextlib import asynccontextmanager

from forgetloc.utils.exceptions import ConsistencyError, FetchError, ForgetLocError
from forgetloc.utils.logger import logger
from forgetloc.config.settings import app_settings, validate_settings
from forgetloc.middleware.custom import LoggingMiddleware
from forgetloc.models.schemas import ErrorResponse
from forgetloc.routes import main_routes, experiment_routes

logger.info("Logger initialized")

@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info(f"Serving results from {app_settings.results_dir}")
    if not validate_settings():
        app_settings.print_settings_summary()
    yield
    logger.debug("Application shutdown")

# Create FastAPI app
app = FastAPI(
    title=app_settings.app_name,
    version=app_settings.app_version,
    debug=app_settings.debug,
    lifespan=lifespan
)

# Add middleware
app.add_middleware(LoggingMiddleware)
app.add_middleware(
    CORSMiddleware,
    allow_origins=app_settings.cors_origins,
    allow_credentials=True,
    allow_methods=["GET"],
    allow_headers=["*"],
)


def _status_for(error: ForgetLocError) -> int:
    if isinstance(error, FetchError):
        return 404
    if isinstance(error, ConsistencyError):
        return 409
    return 400


@app.exception_handler(ForgetLocError)
async def forgetloc_error_handler(request: Request, exc: ForgetLocError):
    logger.error(f"{request.method} {request.url.path} failed: {exc}")
    body = ErrorResponse(error=str(exc), error_code=type(exc).__name__)
    return JSONResponse(status_code=_status_for(exc), content=body.model_dump(mode="json"))

# Include routers
app.include_router(main_routes.router, prefix="/api/v1", tags=["main"])
app.include_router(experiment_routes.router, prefix="/api/v1/experiments", tags=["experiments"])

@app.get("/")
async def root():
    """Root endpoint"""
    return {
        "message": "forgetloc results API",
        "version": app_settings.app_version,
        "status": "running"
    }

if __name__ == "__main__":
    import uvicorn
    uvicorn.run(
        "forgetloc.main:app",
        host=app_settings.host,
        port=app_settings.port,
        reload=app_settings.reload
    )
