from __future__ import annotations

from typing import Any

import yaml

from .stage import LabStage


class LabStageFactory:
    """Factory class to make pipeline stages

    Expected usage is that user will define a yaml file with the stages they
    wish to run, using the following example syntax:

    - Stage:
          name: corona_m8
          class_name: purlab.stages.MeasureCoronaStage
          m_prime: 8.0
          depth: 3
    - Stage:
          name: levelset_loose
          class_name: purlab.stages.LevelSetStage
          strict: false

    And group them into ordered lists that make up a run, using the following
    example syntax:

    - StageList:
          name: corona_only
          stages:
              - green
              - corona_m8
    """
    _instance: LabStageFactory | None = None

    def __init__(self) -> None:
        """C'tor, build an empty LabStageFactory"""
        if self._instance is not None:
            raise ValueError("LabStageFactory instance already exists")
        self._stage_dict: dict[str, LabStage] = {}
        self._stage_list_dict: dict[str, list[LabStage]] = {}

    @classmethod
    def instance(cls) -> LabStageFactory:
        """Return the singleton instance of the factory"""
        if cls._instance is None:
            cls._instance = LabStageFactory()
        return cls._instance

    @classmethod
    def clear(cls) -> None:
        """Drop every stage and stage list that has been loaded"""
        cls._instance = None

    @classmethod
    def print_contents(cls) -> None:
        """Print the contents of the factory"""
        cls.instance().print_instance_contents()

    @classmethod
    def load_yaml(cls, yaml_file: str) -> None:
        """Load a yaml file

        Parameters
        ----------
        yaml_file: str
            File to read and load

        Notes
        -----
        The format of the yaml file should be

        - Stage
              name: some_name
              class_name: purlab.stages.<ClassName>
              <other_parameters>
        - StageList
              name: stage_list_name
              stages:
                  - some_name
        """
        cls.instance().load_instance_yaml(yaml_file)

    @classmethod
    def get_stage_dict(cls) -> dict[str, LabStage]:
        """Return the dict of all the stages"""
        return cls.instance().stage_dict

    @classmethod
    def get_stage_names(cls) -> list[str]:
        """Return the names of the stages"""
        return list(cls.instance().stage_dict.keys())

    @classmethod
    def get_stage_list_dict(cls) -> dict[str, list[LabStage]]:
        """Return the dict of all the stage lists"""
        return cls.instance().stage_list_dict

    @classmethod
    def get_stage_list_names(cls) -> list[str]:
        """Return the names of the stage lists"""
        return list(cls.instance().stage_list_dict.keys())

    @classmethod
    def get_stage(cls, name: str) -> LabStage:
        """Get a stage by its assigned name"""
        try:
            return cls.instance().stage_dict[name]
        except KeyError as msg:
            raise KeyError(
                f"Stage named {name} not found in LabStageFactory "
                f"{list(cls.instance().stage_dict.keys())}"
            ) from msg

    @classmethod
    def get_stage_list(cls, name: str) -> list[LabStage]:
        """Get a list of stages by its assigned name"""
        try:
            return cls.instance().stage_list_dict[name]
        except KeyError as msg:
            raise KeyError(
                f"StageList named {name} not found in LabStageFactory "
                f"{list(cls.instance().stage_list_dict.keys())}"
            ) from msg

    @property
    def stage_dict(self) -> dict[str, LabStage]:
        return self._stage_dict

    @property
    def stage_list_dict(self) -> dict[str, list[LabStage]]:
        return self._stage_list_dict

    def print_instance_contents(self) -> None:
        """Print the contents of the factory"""
        print("Stages:")
        for stage_name, stage in self.stage_dict.items():
            print(f"  {stage_name}: {type(stage).__name__}")
        print("----------------")
        print("StageLists")
        for stage_list_name, stage_list in self.stage_list_dict.items():
            print(f"  {stage_list_name}: {stage_list}")

    def _make_stage(self, name: str, config_dict: dict[str, Any]) -> LabStage:
        if name in self._stage_dict:
            raise KeyError(f"Stage {name} is already defined")
        stage = LabStage.create_from_dict(name, config_dict)
        self._stage_dict[name] = stage
        return stage

    def _make_stage_list(self, name: str, stage_list: list[str]) -> list[LabStage]:
        if name in self._stage_list_dict:
            raise KeyError(f"StageList {name} is already defined")
        stages: list[LabStage] = []
        for stage_name in stage_list:
            try:
                stages.append(self._stage_dict[stage_name])
            except KeyError as msg:
                raise KeyError(
                    f"Stage {stage_name} used in StageList "
                    f"is not found {list(self._stage_dict.keys())}"
                ) from msg
        self._stage_list_dict[name] = stages
        return stages

    def load_instance_yaml(self, yaml_file: str) -> None:
        """Read a yaml file and load the factory accordingly

        See `LabStageFactory.load_yaml` for yaml file syntax
        """
        with open(yaml_file, encoding="utf-8") as fin:
            stage_data = yaml.safe_load(fin) or []

        for stage_item in stage_data:
            if "Stage" in stage_item:
                stage_config = dict(stage_item["Stage"])
                try:
                    name = stage_config.pop("name")
                except KeyError as msg:
                    raise KeyError(
                        f"Stage yaml block does not contain name for stage: {list(stage_config.keys())}"
                    ) from msg
                self._make_stage(name, stage_config)
            elif "StageList" in stage_item:
                list_config = dict(stage_item["StageList"])
                try:
                    name = list_config.pop("name")
                except KeyError as msg:
                    raise KeyError(
                        f"StageList yaml block does not contain name: {list(list_config.keys())}"
                    ) from msg
                try:
                    stages = list_config.pop("stages")
                except KeyError as msg:
                    raise KeyError(
                        f"StageList yaml block does not contain stages: {list(list_config.keys())}"
                    ) from msg
                self._make_stage_list(name, stages)
            else:
                good_keys = ["Stage", "StageList"]
                raise KeyError(f"Expecting one of {good_keys} not: {list(stage_item.keys())}")
