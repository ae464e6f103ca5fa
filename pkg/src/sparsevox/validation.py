"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

from .exceptions import ConfigError, NotFittedError
from .scenegen import Scene


def check_scenes(X) -> list[Scene]:
    """Accept a list/tuple of Scene objects; anything else is an error."""
    if isinstance(X, Scene):
        return [X]
    try:
        scenes = list(X)
    except TypeError as exc:
        raise ConfigError(f"expected a sequence of Scene, got {type(X).__name__}") from exc
    if not scenes:
        raise ConfigError("expected at least one scene")
    for i, s in enumerate(scenes):
        if not isinstance(s, Scene):
            raise ConfigError(f"item {i} is {type(s).__name__}, expected Scene")
    return scenes


def check_is_fitted(estimator, attribute: str = "model_") -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} instance is not fitted yet; call fit() first"
        )
