from .store import AnnotationTask, HubStore
from .service import create_app

__all__ = ["AnnotationTask", "HubStore", "create_app"]
