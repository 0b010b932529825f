"""Graph control barrier functions for multi-agent safe control: learning, baselines and audits.

Importing the package is cheap; submodules are imported on demand so that the
command-line entry point can set thread limits before numpy loads.
"""

__version__ = "0.1.0"
