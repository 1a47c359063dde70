"""
Coefficient expression grammar.
Identifiers x and t, named parameters, + - * / ^ and exp, sin, cos, sqrt.
"""
import ast
from typing import Dict, Mapping, Optional

import numpy as np

from src.exceptions import ConfigError

_FUNCTIONS = {
    "exp": np.exp,
    "sin": np.sin,
    "cos": np.cos,
    "sqrt": np.sqrt,
}

_BINARY = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}

_CONSTANTS = {"pi": np.pi}


class Expression:
    """A parsed, vectorized arithmetic expression in x and t."""

    def __init__(self, text: str, parameters: Optional[Mapping[str, float]] = None):
        self.text = text
        self.parameters: Dict[str, float] = dict(parameters or {})
        try:
            tree = ast.parse(text.replace("^", "**"), mode="eval")
        except SyntaxError as e:
            raise ConfigError(f"cannot parse expression '{text}': {e.msg}") from e
        self._names = set()
        self._validate(tree.body)
        self._body = tree.body

    @property
    def depends_on_t(self) -> bool:
        return "t" in self._names

    def _validate(self, node: ast.AST) -> None:
        if isinstance(node, ast.BinOp):
            if type(node.op) not in _BINARY:
                raise ConfigError(f"operator not allowed in '{self.text}'")
            self._validate(node.left)
            self._validate(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.USub, ast.UAdd)):
                raise ConfigError(f"unary operator not allowed in '{self.text}'")
            self._validate(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
                raise ConfigError(f"unknown function in '{self.text}'")
            if len(node.args) != 1 or node.keywords:
                raise ConfigError(f"functions take exactly one argument in '{self.text}'")
            self._validate(node.args[0])
        elif isinstance(node, ast.Name):
            if node.id not in ("x", "t") and node.id not in self.parameters and node.id not in _CONSTANTS:
                raise ConfigError(f"unknown identifier '{node.id}' in '{self.text}'")
            self._names.add(node.id)
        elif isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise ConfigError(f"only numeric literals allowed in '{self.text}'")
        else:
            raise ConfigError(f"unsupported syntax in '{self.text}'")

    def _eval(self, node: ast.AST, x: np.ndarray, t: float) -> np.ndarray:
        if isinstance(node, ast.BinOp):
            return _BINARY[type(node.op)](self._eval(node.left, x, t), self._eval(node.right, x, t))
        if isinstance(node, ast.UnaryOp):
            value = self._eval(node.operand, x, t)
            return -value if isinstance(node.op, ast.USub) else value
        if isinstance(node, ast.Call):
            return _FUNCTIONS[node.func.id](self._eval(node.args[0], x, t))
        if isinstance(node, ast.Name):
            if node.id == "x":
                return x
            if node.id == "t":
                return np.full_like(x, t)
            if node.id in self.parameters:
                return np.full_like(x, float(self.parameters[node.id]))
            return np.full_like(x, _CONSTANTS[node.id])
        return np.full_like(x, float(node.value))

    def __call__(self, x, t: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        with np.errstate(all="ignore"):
            return np.broadcast_to(self._eval(self._body, x, float(t)), x.shape).astype(float)

    def __repr__(self) -> str:
        return f"Expression({self.text!r})"
