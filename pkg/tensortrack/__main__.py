import click
import cloup
import rich.traceback

rich.traceback.install(show_locals=True, suppress=[click, cloup])
from .cli import cli

cli()
