import logging, sys

from .config import settings

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s [%(run_id)s] %(message)s"


class RunIdFilter(logging.Filter):
    def __init__(self, run_id: str = "-"):
        super().__init__()
        self.run_id = run_id

    def filter(self, record):
        if not hasattr(record, "run_id"):
            record.run_id = self.run_id
        return True


def configure_logging(run_id: str = "-", level: str | None = None):
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_gabi_handler", False):
            root.removeHandler(h)
    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler.addFilter(RunIdFilter(run_id))
    handler._gabi_handler = True
    root.setLevel(level or settings.log_level)
    root.addHandler(handler)
