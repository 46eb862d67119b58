"""Reference stdio model server for the barrier-probe wire protocol."""

from .server import MockLexModel, Server, main

__all__ = ["MockLexModel", "Server", "main"]
