"""Two-stage (translate, then post-edit) policy-gradient simulator."""

__version__ = "0.1.0"
