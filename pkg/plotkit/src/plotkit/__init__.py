"""Figure rendering for mspred experiment CSVs."""

from .render import FIGURE_KINDS, FigureSpec, NoDataError, RenderResult, SchemaError, render

__version__ = "0.1.0"
