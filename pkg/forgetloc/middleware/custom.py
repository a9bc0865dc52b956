from forgetloc.utils.logger import logger

import time
from fastapi import Request
from starlette.middleware.base import BaseHTTPMiddleware


PROCESS_TIME_HEADER = "X-Process-Time"


class LoggingMiddleware(BaseHTTPMiddleware):
    """Logs every request with its status and elapsed time.

    Figure rendering can take seconds on a cold cache, so the elapsed time is
    also returned to the client in a response header.
    """

    async def dispatch(self, request: Request, call_next):
        start_time = time.perf_counter()
        logger.info(f"Request: {request.method} {request.url.path}")

        response = await call_next(request)

        elapsed = time.perf_counter() - start_time
        response.headers[PROCESS_TIME_HEADER] = f"{elapsed:.4f}"

        message = (f"Response: {response.status_code} for {request.method} "
                   f"{request.url.path} in {elapsed:.2f}s")
        if response.status_code >= 500:
            logger.error(message)
        elif response.status_code >= 400:
            logger.warning(message)
        else:
            logger.info(message)
        return response
