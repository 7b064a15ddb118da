"""HTTP service exposing the experiment pipeline."""

from fedcourse.service.app import create_app

__all__ = ["create_app"]
