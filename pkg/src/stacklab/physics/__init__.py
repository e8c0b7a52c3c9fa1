"""Fixed-step rigid-body simulation of cuboid towers."""
from .world import (ContactManifold, RigidBody, SimConfig, SimTrace, World, detect_contacts,
                    run, simulate, solve_contacts, step)

__all__ = ["ContactManifold", "RigidBody", "SimConfig", "SimTrace", "World", "detect_contacts",
           "run", "simulate", "solve_contacts", "step"]
