from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from ceci.config import StageConfig, StageParameter


class Configurable:
    """Base for objects configured through ``config_options``

    Sub-classes declare

    config_options: a dict[str, `ceci.StageParameter`] with the options
    they accept, and

    _inputs: a dict [str, type] with the keyword inputs they expect, used to
    check the kwargs passed to ``__call__``.
    """

    config_options: dict[str, StageParameter] = {}

    _inputs: dict = {}

    def __init__(self, name: str, **kwargs: Any):
        """ C'tor

        Parameters
        ----------
        name: str
            Name for this object, used to label its outputs

        kwargs: Any
            Configuration parameters, must match class.config_options data members
        """
        self._name = name
        self._config = StageConfig(**self.config_options)
        self._set_config(**kwargs)

    @property
    def name(self) -> str:
        return self._name

    @property
    def config(self) -> StageConfig:
        """Return the configuration"""
        return self._config

    def __repr__(self) -> str:
        return f"{self._name}"

    def _set_config(self, **kwargs: Any) -> None:
        kwcopy = kwargs.copy()
        for key in self.config.keys():
            if key in kwargs:
                self.config[key] = kwcopy.pop(key)
            else:
                attr = self.config.get(key)
                if attr.required:
                    raise ValueError(f"Missing configuration option {key}")
                self.config[key] = attr.default
        if kwcopy:
            raise ValueError(f"Unrecognized configuration parameters {list(kwcopy.keys())}")

    @classmethod
    def _validate_inputs(cls, **kwargs: Any) -> None:
        for key, expected_type in cls._inputs.items():
            try:
                data = kwargs[key]
            except KeyError as msg:
                raise KeyError(
                    f"{key} not provided to {cls.__name__} in {list(kwargs.keys())}"
                ) from msg
            if not isinstance(data, expected_type):
                raise TypeError(f"{key} provided to {cls.__name__} was {type(data)}, expected {expected_type}")


@dataclass
class StageResult:
    """What a stage hands back: new artifacts, a summary block and table rows"""

    artifacts: dict[str, Any] = field(default_factory=dict)
    summary: dict[str, Any] = field(default_factory=dict)
    tables: dict[str, list[dict[str, Any]]] = field(default_factory=dict)


class LabStage(Configurable):
    """ Base class for one step of the laboratory pipeline

    The main function in this class is:
    __call__(**kwargs: Any) -> StageResult

    The artifacts produced by earlier stages (the graph, the coefficients,
    the parabolic measure, the regimes, ...) are passed in via the kwargs.

    Sub-classes should implement

    config_options and _inputs, see `Configurable`, and

    _run(self, **kwargs: Any) -> StageResult

    which does the work.  It does not need to check that the correct kwargs
    have been given.
    """

    stage_classes: dict[str, type] = {}

    def __init_subclass__(cls) -> None:
        cls.stage_classes[cls.__name__] = cls

    @classmethod
    def print_classes(cls) -> None:
        """Print the sub-classes of LabStage that have been loaded"""
        for key, val in cls.stage_classes.items():
            print(f"{key} {val}")

    @classmethod
    def get_stage_class(cls, name: str) -> type:
        """Get a particular sub-class of LabStage by name

        Parameters
        ----------
        name: str
            Name of the subclass

        Returns
        -------
        subclass: type
            Subclass in question
        """
        try:
            return cls.stage_classes[name]
        except KeyError as msg:
            raise KeyError(
                f"Could not find stage class {name} in {list(cls.stage_classes.keys())}"
            ) from msg

    @staticmethod
    def load_stage_class(class_name: str) -> type:
        """Import a particular sub-class of LabStage by name

        Parameters
        ----------
        class_name: str
            Full path and name of the subclass, e.g., purlab.stages.GreenStage

        Returns
        -------
        subclass: type
            Subclass in question
        """
        tokens = class_name.split('.')
        module = '.'.join(tokens[:-1])
        class_name = tokens[-1]
        if module:
            __import__(module)
        return LabStage.get_stage_class(class_name)

    @staticmethod
    def create_from_dict(
        name: str,
        config_dict: dict[str, Any],
    ) -> LabStage:
        """Create a LabStage object

        Parameters
        ----------
        name: str
            Name to give to the newly created object

        config_dict: dict[str, Any],
            Configuration parameters

        Returns
        -------
        stage: LabStage
            Newly created stage

        Notes
        -----
        config_dict must include 'class_name' which gives the path and name of the
        class, e.g., purlab.stages.GreenStage
        """
        copy_config = config_dict.copy()
        try:
            class_name = copy_config.pop('class_name')
        except KeyError as msg:
            raise KeyError(f"Stage {name} does not give a class_name: {list(config_dict.keys())}") from msg
        stage_class = LabStage.load_stage_class(class_name)
        return stage_class(name, **copy_config)

    def __call__(self, **kwargs: Any) -> StageResult:
        """ Run the stage on the artifacts of the earlier stages

        Parameters
        ----------
        kwargs: dict[str, Any]
            Artifacts available to the stage

        Returns
        -------
        result: StageResult
            New artifacts, summary block and table rows
        """
        self._validate_inputs(**kwargs)
        return self._run(**kwargs)

    def _run(self, **kwargs: Any) -> StageResult:
        raise NotImplementedError()
