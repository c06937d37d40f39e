from functools import partial
from typing import Any

import click

__all__: list[str] = [
    "PartialOption",
    "config_file",
    "figures",
    "out_dir",
    "seed",
    "threads",
    "verbose",
]


class PartialOption:
    """Wraps click.option with partial arguments for convenient reuse"""

    def __init__(self, *param_decls: Any, **kwargs: Any) -> None:
        self._partial = partial(click.option, *param_decls, cls=partial(click.Option), **kwargs)

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self._partial(*args, **kwargs)


config_file = PartialOption(
    "--config",
    "config_file",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Scenario yaml file",
)


seed = PartialOption(
    "--seed",
    type=int,
    default=None,
    help="Random seed, overrides the scenario",
)


out_dir = PartialOption(
    "--out",
    "out_dir",
    type=click.Path(file_okay=False),
    default=None,
    help="Output directory, overrides the scenario",
)


threads = PartialOption(
    "--threads",
    type=int,
    default=None,
    help="FFT worker threads, overrides the scenario",
)


verbose = PartialOption(
    "-v",
    "--verbose",
    count=True,
    help="Log INFO with -v and DEBUG with -vv",
)


figures = PartialOption(
    "--figures",
    is_flag=True,
    help="Also write png figures of the tables",
)
