from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from typing import Optional
import os
import sys

# Add parent directory to path to import config.py from project root
parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from metric_metadata import GATE_METADATA
from storage import RunDirectory, RunStorage


def create_app(storage: Optional[RunStorage] = None) -> FastAPI:
    """Read-only JSON browser over the run index"""
    storage = storage if storage is not None else RunStorage()

    app = FastAPI(title="Controllable Factors Run Browser", version="1.0.0")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["GET"],
        allow_headers=["*"],
    )

    # Health check endpoint
    @app.get("/")
    async def root():
        return {
            "status": "online",
            "message": "Run browser is running",
            "version": "1.0.0",
        }

    @app.get("/runs")
    async def get_runs(limit: int = 20, status: Optional[str] = None):
        """
        Query params:
        - limit: Max number of runs to return (default 20)
        - status: Filter by status (optional)
        """
        runs = storage.get_run_history(limit=limit)
        if status:
            runs = [r for r in runs if r["status"] == status]
        return runs

    @app.get("/runs/{run_id}")
    async def get_run(run_id: str):
        try:
            return storage.load_run(run_id)
        except FileNotFoundError:
            raise HTTPException(status_code=404, detail=f"Run {run_id} not found")

    @app.get("/runs/{run_id}/metrics")
    async def get_run_metrics(run_id: str, tail: int = 100):
        """Last `tail` rows of the run's metrics.csv"""
        try:
            run = storage.load_run(run_id)
            frame = RunDirectory(run["run_dir"]).read_metrics()
        except FileNotFoundError as e:
            raise HTTPException(status_code=404, detail=str(e))
        frame = frame.tail(tail).astype(object).where(frame.tail(tail).notna(), None)
        return {"run_id": run_id, "rows": frame.to_dict(orient="records")}

    @app.get("/runs/{run_id}/evaluations")
    async def get_run_evaluations(run_id: str):
        try:
            storage.load_run(run_id)
        except FileNotFoundError:
            raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
        return storage.get_evaluations_for_run(run_id)

    @app.get("/stats")
    async def get_stats():
        return storage.get_run_statistics()

    @app.get("/gates")
    async def get_gates():
        return GATE_METADATA

    return app


if __name__ == "__main__":
    import uvicorn

    print("\n" + "=" * 70)
    print("🚀 Starting Controllable Factors Run Browser")
    print("=" * 70)
    print("\n📍 API will be available at: http://localhost:8000")
    print("📖 API Documentation: http://localhost:8000/docs")
    print("\n" + "=" * 70 + "\n")

    uvicorn.run(create_app(), host="0.0.0.0", port=8000)
