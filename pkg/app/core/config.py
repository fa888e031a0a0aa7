"""
Application configuration using Pydantic Settings
"""
from pydantic_settings import BaseSettings, SettingsConfigDict
from functools import lru_cache
from typing import Literal, Optional


class Settings(BaseSettings):
    """Pipeline settings loaded from environment variables"""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )

    # Application
    APP_NAME: str = "RoboStream Desk"
    VERSION: str = "1.0.0"
    DEBUG: bool = False
    HOST: str = "0.0.0.0"
    PORT: int = 8000
    CORS_ORIGINS: list[str] = ["*"]

    # STF-Tokens
    STF_GRID_N: int = 16
    STF_IOU_THRESHOLD: float = 0.5
    STF_BOX_EPS: float = 1e-6
    STF_SERIAL_PRECISION: int = 4
    CENTROID_NOISE_BOUND: float = 0.005
    NAIVE_DEPTH: float = 1.0

    # CSTG
    CSTG_WINDOW_K: int = 3
    ASSOC_GATE: float = 0.10
    EVENT_MOVE_EPS: float = 0.01
    OCCLUDER_EXPANSION: float = 0.02
    SUPPORT_GAP_MAX: float = 0.02
    RELATION_EPS: float = 0.01
    NEAR_DISTANCE: float = 0.10
    CONTEXT_EVENT_LINES: int = 20

    # Planner
    STABILITY_FRACTION: float = 0.5
    APPROACH_OFFSET: float = 0.02
    MAX_REPLANS: int = 3
    WORKSPACE_MIN: tuple[float, float, float] = (-0.35, -0.35, -0.01)
    WORKSPACE_MAX: tuple[float, float, float] = (0.35, 0.35, 0.40)

    # Remote planner endpoint (OpenAI-compatible chat completions)
    PLANNER_ENDPOINT_URL: str = "http://localhost:8000/v1"
    PLANNER_API_KEY: Optional[str] = None
    PLANNER_MODEL: str = "qwen3-vl-8b-instruct"
    PLANNER_TIMEOUT_S: float = 30.0
    PLANNER_MAX_RETRIES: int = 2

    # Simulator
    RENDER_PROJECTION: Literal["orthographic", "pinhole"] = "orthographic"
    RENDER_WIDTH: int = 128
    RENDER_HEIGHT: int = 64
    RENDER_PIXEL_SIZE: float = 0.005
    RENDER_CAMERA_DISTANCE: float = 1.0
    RENDER_NOISE_SIGMA: float = 0.0
    GRASP_RADIUS: float = 0.03
    LIFT_HEIGHT: float = 0.05
    POSITION_TOLERANCE: float = 0.02
    SEED_JITTER: float = 0.01

    # Harness
    SUITE_EPISODES: int = 25
    SUITE_WORKERS: int = 4
    OUTPUT_DIR: str = "runs"
    TASKS_DIR: Optional[str] = None


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance"""
    return Settings()


settings = get_settings()
