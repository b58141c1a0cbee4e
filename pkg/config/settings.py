from pydantic_settings import BaseSettings
from typing import List, Optional

class Settings(BaseSettings):
    environment: str = "development"
    log_level: str = "INFO"
    output_dir: str = "runs"
    sim_dt: float = 0.01           # s, plant integration step
    control_period: float = 0.2    # s, zero-order hold of planner output
    max_sim_time: float = 600.0    # s
    batch_workers: Optional[int] = None
    bench_duration: float = 30.0   # s of simulated time for `bench`
    cors_origins: List[str] = ["http://localhost:3000"]
    api_host: str = "0.0.0.0"
    api_port: int = 8000

    class Config:
        env_file = ".env"
        env_prefix = "INSPECT_"

settings = Settings()
