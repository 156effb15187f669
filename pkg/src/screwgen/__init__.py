"""screwgen: fold-free structured meshes for rotating twin-screw extruder
geometries via spline parameterization and scaffold-based mesh updates."""

__version__ = "0.1.0"
