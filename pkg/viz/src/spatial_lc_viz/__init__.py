"""Figure scripts for spatial Lee-Carter output bundles.

Stateless renderers that consume the CSV/GeoJSON files written by the
modelling package; there is no coupling beyond the file formats.
"""

from .figures import (VizError, plot_age, plot_compound, plot_maps,
                      plot_trend)

__all__ = ["VizError", "plot_trend", "plot_age", "plot_compound",
           "plot_maps"]

__version__ = "0.1.0"
