"""
Stack notation.

``[H_2^{2,8},H_3^{4,6}]`` puts a 2-order layer at layers 2 and 8 and a
3-order layer at 4 and 6 (0-based); unlisted layers are order 1 and
``[None]`` is the all-MHSA baseline. After the bracket, ``key=value``
tokens carry the rest of the geometry, so one string fully determines a
model::

    [H_2^{1},H_3^{2}] layers=4 width=64 heads=4 parts=4 classes=8 mode=full ...
"""

import logging
from dataclasses import dataclass, fields, replace
from typing import Dict, List, Optional, Tuple

from ohformer.errors import ConfigurationError, ParseError
from ohformer.nn.lrp import DEFAULT_VARIANT, parse_variant
from ohformer.nn.oh_layer import MAX_ORDER, MODES, PRIOR_AXES

logger = logging.getLogger(__name__)

HIGH_ORDERS = tuple(range(2, MAX_ORDER + 1))


@dataclass(frozen=True)
class StackSpec:
    layers: int = 4
    orders: Tuple[Tuple[int, int], ...] = ((1, 2), (2, 3))
    mode: str = "full"
    heads: int = 4
    width: int = 64
    parts: int = 4
    classes: int = 8
    lrp: str = DEFAULT_VARIANT
    prior_mixing: bool = True
    prior_axis: str = "key"
    tie_vk: bool = False
    deform_depthwise: bool = False
    mlp_ratio: int = 4
    input_size: Tuple[int, int] = (60, 30)

    def order_of(self, layer: int) -> int:
        return dict(self.orders).get(layer, 1)

    def layer_orders(self) -> List[int]:
        return [self.order_of(i) for i in range(self.layers)]

    def high_order_layers(self) -> List[int]:
        return [i for i in range(self.layers) if self.order_of(i) > 1]

    def validate(self) -> "StackSpec":
        """
        Raises:
            ConfigurationError: inconsistent geometry or unknown option
        """
        if self.layers < 1:
            raise ConfigurationError(f"layers must be >= 1, got {self.layers}")
        if self.heads < 1 or self.width % self.heads:
            raise ConfigurationError(f"width {self.width} is not divisible by {self.heads} heads")
        if self.parts < 1:
            raise ConfigurationError(f"parts must be >= 1, got {self.parts}")
        if self.classes < 1:
            raise ConfigurationError(f"classes must be >= 1, got {self.classes}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.prior_axis not in PRIOR_AXES:
            raise ConfigurationError(f"unknown prior_axis {self.prior_axis!r}")
        if self.tie_vk and self.mode == "shared":
            raise ConfigurationError("tie_vk applies to full mode only")
        if self.mlp_ratio < 1:
            raise ConfigurationError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        parse_variant(self.lrp)
        for layer, order in self.orders:
            if not 0 <= layer < self.layers or order not in HIGH_ORDERS:
                raise ConfigurationError(f"layer {layer} order {order} does not fit a {self.layers}-layer stack")
        return self


def stack_spec(**kwargs) -> StackSpec:
    """Build and validate a spec; ``orders`` may be a dict."""
    orders = kwargs.pop("orders", None)
    if isinstance(orders, dict):
        kwargs["orders"] = tuple(sorted(orders.items()))
    elif orders is not None:
        kwargs["orders"] = tuple(sorted(orders))
    return StackSpec(**kwargs).validate()


_INT_KEYS = {"layers", "heads", "width", "parts", "classes", "mlp_ratio"}
_BOOL_KEYS = {"prior_mixing", "tie_vk", "deform_depthwise"}
_STR_KEYS = {"mode", "lrp", "prior_axis"}
_TOKEN_KEYS = _INT_KEYS | _BOOL_KEYS | _STR_KEYS | {"input"}


class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, message: str, pos: Optional[int] = None) -> ParseError:
        return ParseError(message, self.pos if pos is None else pos, self.text)

    def skip_space(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self, literal: str) -> bool:
        return self.text.startswith(literal, self.pos)

    def expect(self, literal: str) -> None:
        if not self.peek(literal):
            found = self.text[self.pos:self.pos + len(literal)] or "end of text"
            raise self.error(f"expected {literal!r}, found {found!r}")
        self.pos += len(literal)

    def integer(self) -> Tuple[int, int]:
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        if start == self.pos:
            raise self.error("expected a number")
        return int(self.text[start:self.pos]), start


def _parse_groups(scanner: _Scanner) -> List[Tuple[int, int, int]]:
    """Bracket part; returns (layer, order, position) triples."""
    scanner.expect("[")
    scanner.skip_space()
    if scanner.peek("None"):
        scanner.expect("None")
        scanner.skip_space()
        scanner.expect("]")
        return []
    entries = []
    while True:
        scanner.skip_space()
        scanner.expect("H_")
        order, order_pos = scanner.integer()
        if order not in HIGH_ORDERS:
            raise scanner.error(f"unsupported order {order}; expected one of {HIGH_ORDERS}", order_pos)
        scanner.expect("^")
        braced = scanner.peek("{")
        if braced:
            scanner.expect("{")
        while True:
            scanner.skip_space()
            layer, layer_pos = scanner.integer()
            entries.append((layer, order, layer_pos))
            scanner.skip_space()
            if braced and scanner.peek(","):
                scanner.expect(",")
                continue
            break
        if braced:
            scanner.expect("}")
        scanner.skip_space()
        if scanner.peek(","):
            scanner.expect(",")
            continue
        scanner.expect("]")
        return entries


def _token_value(key: str, raw: str, scanner: _Scanner, pos: int):
    if key in _INT_KEYS:
        if not raw.isdigit():
            raise scanner.error(f"{key} needs a non-negative integer, got {raw!r}", pos)
        return int(raw)
    if key in _BOOL_KEYS:
        if raw not in ("true", "false"):
            raise scanner.error(f"{key} needs true or false, got {raw!r}", pos)
        return raw == "true"
    if key == "input":
        height, sep, width = raw.partition("x")
        if not sep or not height.isdigit() or not width.isdigit():
            raise scanner.error(f"input needs HxW, got {raw!r}", pos)
        return int(height), int(width)
    return raw


def parse_stack(text: str, layers: Optional[int] = None, **defaults) -> StackSpec:
    """
    Parse stack notation into a ``StackSpec``.

    Args:
        text: Bracket notation, optionally followed by ``key=value`` tokens
        layers: Layer count when the text does not carry ``layers=``. With neither, the
            depth is the default one widened to reach the deepest layer the text names
        defaults: Other ``StackSpec`` fields used when the text omits them

    Raises:
        ParseError: malformed text, unsupported order, duplicate layer index, or an index
            beyond a fixed layer count
    """
    scanner = _Scanner(text)
    scanner.skip_space()
    entries = _parse_groups(scanner)

    values: Dict[str, object] = dict(defaults)
    if layers is not None:
        values["layers"] = layers
    seen = set()
    while True:
        scanner.skip_space()
        if scanner.pos >= len(text):
            break
        start = scanner.pos
        end = start
        while end < len(text) and not text[end].isspace():
            end += 1
        token = text[start:end]
        key, sep, raw = token.partition("=")
        if not sep or key not in _TOKEN_KEYS:
            raise scanner.error(f"unknown stack option {token!r}", start)
        if key in seen:
            raise scanner.error(f"stack option {key} given twice", start)
        seen.add(key)
        value = _token_value(key, raw, scanner, start + len(key) + 1)
        values["input_size" if key == "input" else key] = value
        scanner.pos = end

    total = values.get("layers")
    if total is None:
        deepest = max((layer for layer, _, _ in entries), default=-1)
        total = max(StackSpec.layers, deepest + 1)
        if total > StackSpec.layers:
            logger.info("stack names layer %d; building %d layers", deepest, total)
        values["layers"] = total
    orders: Dict[int, int] = {}
    for layer, order, pos in entries:
        if layer in orders:
            raise scanner.error(f"layer {layer} listed twice", pos)
        if layer >= total:
            raise scanner.error(f"layer {layer} outside a {total}-layer stack", pos)
        orders[layer] = order
    values["orders"] = tuple(sorted(orders.items()))
    known = {f.name for f in fields(StackSpec)}
    spec = StackSpec(**{k: v for k, v in values.items() if k in known})
    return spec.validate()


def format_orders(spec: StackSpec) -> str:
    if not spec.orders:
        return "[None]"
    groups: Dict[int, List[int]] = {}
    for layer, order in spec.orders:
        groups.setdefault(order, []).append(layer)
    parts = [f"H_{order}^{{{','.join(str(i) for i in sorted(groups[order]))}}}" for order in sorted(groups)]
    return "[" + ",".join(parts) + "]"


def format_stack(spec: StackSpec) -> str:
    """Canonical full text; ``parse_stack(format_stack(s)) == s``."""
    def flag(value: bool) -> str:
        return "true" if value else "false"

    tokens = [
        format_orders(spec),
        f"layers={spec.layers}",
        f"width={spec.width}",
        f"heads={spec.heads}",
        f"parts={spec.parts}",
        f"classes={spec.classes}",
        f"mode={spec.mode}",
        f"lrp={spec.lrp}",
        f"prior_mixing={flag(spec.prior_mixing)}",
        f"prior_axis={spec.prior_axis}",
        f"tie_vk={flag(spec.tie_vk)}",
        f"deform_depthwise={flag(spec.deform_depthwise)}",
        f"mlp_ratio={spec.mlp_ratio}",
        f"input={spec.input_size[0]}x{spec.input_size[1]}",
    ]
    return " ".join(tokens)


def with_overrides(spec: StackSpec, **changes) -> StackSpec:
    return replace(spec, **changes).validate()
