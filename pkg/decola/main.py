"""
DECOLA inference API
"""
from contextlib import asynccontextmanager

import uvicorn
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from decola import __version__
from decola.config import configure_logging, settings
from decola.routers import detect


@asynccontextmanager
async def lifespan(app: FastAPI):
    # Startup: logging only, the model loads on the first request
    configure_logging()
    yield


app = FastAPI(
    title="DECOLA API",
    description="Language-conditioned open-vocabulary object detection",
    version=__version__,
    lifespan=lifespan
)

# CORS Configuration
app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.CORS_ORIGINS,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(detect.router, prefix="/api/v1/detect", tags=["Detection"])


@app.get("/")
async def root():
    return {
        "message": "DECOLA API",
        "version": __version__,
        "status": "operational"
    }


@app.get("/health")
async def health_check():
    return {"status": "healthy", "checkpoint": settings.CHECKPOINT_PATH}


if __name__ == "__main__":
    uvicorn.run(
        "decola.main:app",
        host=settings.API_HOST,
        port=settings.API_PORT,
        reload=settings.API_RELOAD
    )
