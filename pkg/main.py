from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from contextlib import asynccontextmanager
from config.settings import settings
from routes import missions
import logging

logging.basicConfig(level=settings.log_level.upper(),
                    format="%(asctime)s %(levelname)s %(name)s: %(message)s")
logger = logging.getLogger(__name__)

# Application lifespan
@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info("Starting inspection planning API (%s)", settings.environment)
    logger.info("CORS enabled for: %s", ", ".join(settings.cors_origins))
    yield
    logger.info("Shutting down inspection planning API")

# Create FastAPI app
app = FastAPI(
    title="Free-Flyer Inspection Planner API",
    description="Mission validation and closed-loop simulation for free-flyer inspection",
    version="1.0.0",
    lifespan=lifespan
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.cors_origins,
    allow_credentials=True,
    allow_methods=["GET", "POST", "OPTIONS"],
    allow_headers=["*"],
)

app.include_router(missions.router)

# Root endpoint
@app.get("/")
async def root():
    return {
        "message": "Free-Flyer Inspection Planner API",
        "version": "1.0.0",
        "status": "healthy",
        "environment": settings.environment,
        "features": [
            "Mission validation",
            "Closed-loop flyby and linger simulation",
            "Thruster fault injection",
        ]
    }

# Health check endpoint
@app.get("/health")
async def health_check():
    return {
        "status": "healthy",
        "api": "running",
        "environment": settings.environment
    }

if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host=settings.api_host, port=settings.api_port)
