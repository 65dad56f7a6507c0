import platform
import textwrap
from typing import Dict, Optional

_ANSI: Dict[str, str] = {
    "reset": "\033[0m",
    "red": "\033[0;31m",
    "green": "\033[0;32m",
    "brown": "\033[0;33m",
    "gray": "\033[0;37m",
    "yellow": "\033[1;33m",
    "light_blue": "\033[1;34m",
    "white": "\033[1;37m",
}


class PrintColor:
    """Console printer for check reports: ANSI colors, optional wrapping and indentation"""

    def __init__(self, use_color: bool = True, max_width: int = 0, indentation: int = 0):
        self._use_color: bool = use_color
        self._max_width: int = max_width
        self._indentation: int = indentation

        if use_color and platform.system() == "Windows":
            try:
                import colorama
            except ImportError:
                print('Colored output needs colorama ("pip install colorama")')
                print("[Continuing using no color mode]\n")
                self._use_color = False
            else:
                colorama.init()

    def _emit(
        self,
        color: str,
        text: str,
        max_width: Optional[int] = None,
        indentation: Optional[int] = None,
    ) -> None:
        width = max_width or self._max_width
        indent = " " * (indentation or self._indentation)
        chunks = textwrap.wrap(text, width) if width > 0 else [text]

        for chunk in chunks or [""]:
            line = indent + chunk
            if self._use_color:
                line = _ANSI[color] + line + _ANSI["reset"]
            print(line)

    def red(self, text: str, max_width: Optional[int] = None, indentation: Optional[int] = None):
        self._emit("red", text, max_width, indentation)

    def green(self, text: str, max_width: Optional[int] = None, indentation: Optional[int] = None):
        self._emit("green", text, max_width, indentation)

    def brown(self, text: str, max_width: Optional[int] = None, indentation: Optional[int] = None):
        self._emit("brown", text, max_width, indentation)

    def gray(self, text: str, max_width: Optional[int] = None, indentation: Optional[int] = None):
        self._emit("gray", text, max_width, indentation)

    def yellow(self, text: str, max_width: Optional[int] = None, indentation: Optional[int] = None):
        self._emit("yellow", text, max_width, indentation)

    def light_blue(
        self, text: str, max_width: Optional[int] = None, indentation: Optional[int] = None
    ):
        self._emit("light_blue", text, max_width, indentation)

    def white(self, text: str, max_width: Optional[int] = None, indentation: Optional[int] = None):
        self._emit("white", text, max_width, indentation)
