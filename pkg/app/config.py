import os
from pydantic import BaseModel


class Settings(BaseModel):
    runs_dir: str = os.getenv("RUNS_DIR", "runs")
    log_level: str = os.getenv("LOG_LEVEL", "INFO")
    threads: int = int(os.getenv("THREADS", "1"))
    # meshes with more nodes than this get a CSR adjacency instead of a dense one
    dense_node_limit: int = int(os.getenv("DENSE_NODE_LIMIT", "256"))
    checkpoint_path: str | None = os.getenv("CHECKPOINT_PATH")
    allow_origin: str = os.getenv("ALLOW_ORIGIN", "*")


settings = Settings()
