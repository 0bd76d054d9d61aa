"""Figure rendering for the FD-CR benchmark CSV outputs."""

from .render import FigureSpec, RenderError, render

__all__ = ["FigureSpec", "RenderError", "render"]
