"""
HTTP client configuration for the remote planner endpoint
"""
import httpx
from functools import lru_cache
from app.core.config import settings
import logging

logger = logging.getLogger(__name__)


@lru_cache()
def get_planner_client() -> httpx.AsyncClient:
    """
    Get cached async HTTP client for the planner endpoint

    Returns:
        httpx.AsyncClient: client with the configured timeout and connection limits
    """
    try:
        client = httpx.AsyncClient(
            timeout=httpx.Timeout(settings.PLANNER_TIMEOUT_S),
            limits=httpx.Limits(
                max_connections=settings.SUITE_WORKERS,
                max_keepalive_connections=settings.SUITE_WORKERS,
            ),
        )
        logger.info(f"Planner HTTP client initialized for {settings.PLANNER_ENDPOINT_URL}")
        return client
    except Exception as e:
        logger.error(f"Failed to initialize planner HTTP client: {e}")
        raise
