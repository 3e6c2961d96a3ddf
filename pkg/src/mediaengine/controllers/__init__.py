"""Reconciliation controllers for the engine resources."""

from mediaengine.controllers.runtime import Backoff, Controller, ReconcileResult
from mediaengine.controllers.manager import WorkflowManager, WorkflowManagerSettings

__all__ = ["Backoff", "Controller", "ReconcileResult", "WorkflowManager", "WorkflowManagerSettings"]
