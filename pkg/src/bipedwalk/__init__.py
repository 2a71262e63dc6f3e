"""Bipedal walking stack.

Layers, bottom to top: planar unicycle guidance, footstep planning with a
gait timeline, ZMP preview model-predictive control on the table-cart model,
and a whole-body stack-of-tasks QP controller, all wired into a closed-loop
rigid-body simulator with position- and torque-control plants plus a
teleoperation service.
"""

__version__ = "0.1.0"
