"""Entry point for the ltpeft command-line interface."""

from . import app

if __name__ == "__main__":
    app()
