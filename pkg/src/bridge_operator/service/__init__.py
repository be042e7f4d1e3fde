from .app import create_app
from .models import CreatedModel, ErrorModel, JobListModel, JobStatusModel

__all__ = ["CreatedModel", "ErrorModel", "JobListModel", "JobStatusModel", "create_app"]
