"""
Shared console for stage output.
"""
from rich.console import Console

CONSOLE = Console(width=120, highlight=False)


def banner(title: str) -> None:
    CONSOLE.print("=" * 50)
    CONSOLE.print(title)
    CONSOLE.print("=" * 50)
