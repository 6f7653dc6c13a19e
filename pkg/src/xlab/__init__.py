"""Desk-scale model-stealing lab: synthetic tasks, pretrained-style backbones, a budgeted victim API and thieves."""

from . import datagen, evalkit, modelzoo, numcore, thief, victim_api
from .errors import XlabError

__version__ = "0.1.0"

__all__ = ["datagen", "evalkit", "modelzoo", "numcore", "thief", "victim_api", "XlabError"]
