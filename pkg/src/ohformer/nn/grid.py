"""Token sequences that remember their spatial layout."""

from dataclasses import dataclass

from ohformer.errors import ContractError, DimensionError
from ohformer.tensor import Tensor


@dataclass(frozen=True)
class TokenGrid:
    """
    Tokens [B, T, d] laid out row-major over an (height, width) grid.

    ``T == height * width + (1 if has_cls else 0)``; the class token, when
    present, is token 0.
    """

    tokens: Tensor
    height: int
    width: int
    has_cls: bool = False

    def __post_init__(self):
        expected = self.height * self.width + (1 if self.has_cls else 0)
        if self.tokens.ndim != 3 or self.tokens.shape[1] != expected:
            raise DimensionError(
                f"token grid {self.height}x{self.width} (cls={self.has_cls}) needs {expected} tokens",
                self.tokens.shape,
            )

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def channels(self) -> int:
        return self.tokens.shape[2]

    @property
    def shape(self):
        return self.height, self.width

    def spatial(self) -> "TokenGrid":
        """The grid without its class token."""
        if not self.has_cls:
            return self
        return TokenGrid(self.tokens[:, 1:], self.height, self.width, False)

    def cls_token(self) -> Tensor:
        if not self.has_cls:
            raise ContractError("token grid has no class token")
        return self.tokens[:, 0]

    def to_map(self) -> Tensor:
        """[B, d, h, w] feature map of the spatial tokens."""
        if self.has_cls:
            raise ContractError("strip the class token before reshaping tokens to a map")
        return self.tokens.transpose(0, 2, 1).reshape(self.batch, self.channels, self.height, self.width)

    @classmethod
    def from_map(cls, x: Tensor) -> "TokenGrid":
        batch, channels, height, width = x.shape
        tokens = x.reshape(batch, channels, height * width).transpose(0, 2, 1)
        return cls(tokens, height, width, False)
