from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
import os
import logging

from mrdd import __version__
from mrdd.routes.api import router as api_router
from mrdd.database import init_database

logging.basicConfig(level=os.getenv("MRDD_LOG_LEVEL", "INFO"))
logger = logging.getLogger(__name__)

# Create FastAPI app
app = FastAPI(
    title="MRDD Run Service",
    description="Run registry and launcher for two-stage multi-view representation learning",
    version=__version__,
    docs_url="/docs",
    redoc_url="/redoc"
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(api_router, prefix="/api")


@app.on_event("startup")
async def startup_event():
    logger.info("MRDD service starting up...")
    init_database()


@app.on_event("shutdown")
async def shutdown_event():
    logger.info("MRDD service shutting down...")


def serve(host: str = "127.0.0.1", port: int = 8000):
    import uvicorn
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    serve()
