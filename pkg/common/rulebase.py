import inspect
import json
import os
from enum import Enum
from typing import Any, Dict, List, Tuple

from print_color import PrintColor


def logCheck(log_file: str, check_name: str, passed: bool, entry: Dict[str, Any]) -> None:
    """
    Log a self-check result to a json file.
    The JSON file holds a cumulative dict of failing ("errors") and passing ("passed")
    checks, each mapping the check name to a list of result entries.
    """

    if not log_file.endswith(".json"):
        log_file += ".json"

    log_data: Dict[str, Dict[str, List[Any]]] = {}
    if os.path.isfile(log_file):
        with open(log_file, "r") as json_file:
            try:
                log_data = json.load(json_file)
            except ValueError:
                print("Found bad JSON data - clearing")

    key = "passed" if passed else "errors"
    log_data.setdefault(key, {}).setdefault(check_name, []).append(entry)

    with open(log_file, "w") as json_file:
        json_file.write(json.dumps(log_data, indent=4, sort_keys=True, separators=(",", ":")))


class Verbosity(Enum):
    NONE = 0
    NORMAL = 1
    HIGH = 2


class Severity(Enum):
    INFO = 0
    WARNING = 1
    ERROR = 2


class CheckRuleBase:
    """
    A base class to represent a numerical check.

    The check name comes from the defining file (O1_1.py -> O1.1), the description
    from the first docstring line of the subclass.
    """

    verbosity: Verbosity = Verbosity.NONE

    @property
    def name(self) -> str:
        path = os.path.basename(inspect.getfile(self.__class__))
        return os.path.splitext(path)[0].replace("_", ".")

    def __init__(self):
        self.description: str = self.__doc__.strip().splitlines()[0].strip()
        self.messageBuffer: List[Tuple[str, Verbosity, Severity]] = []
        self.error_count: int = 0
        self.warning_count: int = 0

    @property
    def errorCount(self) -> int:
        return self.error_count

    def hasErrors(self) -> bool:
        return self.error_count > 0

    def warningCount(self) -> int:
        return self.warning_count

    def verboseOut(self, msgVerbosity: Verbosity, severity: Severity, message: str) -> None:
        self.messageBuffer.append((message, msgVerbosity, severity))

    def warning(self, msg: str) -> None:
        self.warning_count += 1
        self.verboseOut(Verbosity.NORMAL, Severity.WARNING, msg)

    def error(self, msg: str) -> None:
        self.error_count += 1
        self.verboseOut(Verbosity.NORMAL, Severity.ERROR, msg)

    def info(self, msg: str) -> None:
        self.verboseOut(Verbosity.NONE, Severity.INFO, "> " + msg)

    def check(self) -> None:
        raise NotImplementedError("The check method must be implemented")

    def processOutput(self, printer: PrintColor, verbosity: Verbosity = Verbosity.NONE) -> bool:
        if not self.messageBuffer:
            return False

        if verbosity.value > Verbosity.NONE.value:
            printer.light_blue(self.description, indentation=4, max_width=100)

        colors = {
            Severity.INFO: printer.gray,
            Severity.WARNING: printer.brown,
            Severity.ERROR: printer.red,
        }
        for msg, v, s in self.messageBuffer:
            if v.value <= verbosity.value:
                colors[s](msg, indentation=4)

        self.messageBuffer = []
        return True
