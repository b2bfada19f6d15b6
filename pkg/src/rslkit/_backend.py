"""Pick the compiled kernels when available, else the numpy fallback."""

import os

from . import _fallback

_FUNCS = (
    "abs_diff",
    "angular_distance",
    "matern",
    "matern_sym",
    "changepoint_eval",
    "changepoint_normal_eq",
    "kalman_forward",
    "information_backward",
)


def _load(pure):
    if not pure:
        try:
            from . import _core
        except ImportError:
            pass
        else:
            return "cython", _core
    return "python", _fallback


BACKEND, _impl = _load(os.environ.get("RSLKIT_PURE_PYTHON", "") not in ("", "0"))

abs_diff = _impl.abs_diff
angular_distance = _impl.angular_distance
matern = _impl.matern
matern_sym = _impl.matern_sym
changepoint_eval = _impl.changepoint_eval
changepoint_normal_eq = _impl.changepoint_normal_eq
kalman_forward = _impl.kalman_forward
information_backward = _impl.information_backward


def get(name, backend=None):
    """Return kernel ``name`` from a specific backend ("cython" or "python")."""
    if backend is None:
        return getattr(_impl, name)
    if backend == "python":
        return getattr(_fallback, name)
    if backend == "cython":
        from . import _core

        return getattr(_core, name)
    raise ValueError(f"unknown backend {backend!r}")


def available():
    try:
        from . import _core  # noqa: F401
    except ImportError:
        return ["python"]
    return ["cython", "python"]
