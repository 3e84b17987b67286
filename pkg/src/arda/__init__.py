"""Autonomous R&D loop: plan language, knowledge base, agent cycle, simulated
environment and evaluation harness."""

from arda.agentloop import AgentConfig, CycleReport, Intention, RDAgent, RequirementSpec, run_cycle
from arda.knowledge import KnowledgeBase, MetricVector
from arda.simenv import SimEnvironment, best_action, load_surface
from arda.symlang import ExperimentPlan, FrameworkSchema, SlotPlan, load_schema

__version__ = "0.1.0"

__all__ = [
    "AgentConfig", "CycleReport", "ExperimentPlan", "FrameworkSchema", "Intention", "KnowledgeBase",
    "MetricVector", "RDAgent", "RequirementSpec", "SimEnvironment", "SlotPlan", "best_action",
    "load_schema", "load_surface", "run_cycle",
]
