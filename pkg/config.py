import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from services.errors import ConfigError

logger = logging.getLogger(__name__)


def _ensure_writable_dir(path: Path) -> bool:
    """Create dir (if needed) and verify we can write into it."""
    try:
        path.mkdir(parents=True, exist_ok=True)
        test_file = path / ".write_test"
        test_file.write_text("ok", encoding="utf-8")
        test_file.unlink(missing_ok=True)
        return True
    except OSError:
        return False


def pick_data_root() -> Path:
    """
    Choose a writable output directory.

    Priority:
      1) LAB_DATA_ROOT env var (explicit override)
      2) ./data (inside repo, works locally)
      3) /tmp/nonlocal_lab_data (always writable on Linux, not persistent)
    """
    candidates = []

    env_root = os.environ.get("LAB_DATA_ROOT")
    if env_root:
        candidates.append(Path(env_root))

    candidates.append(Path(__file__).resolve().parent / "data")
    candidates.append(Path("/tmp/nonlocal_lab_data"))

    for p in candidates:
        if _ensure_writable_dir(p):
            return p

    # Last resort: current directory
    return Path(__file__).resolve().parent


# =============================
# LAB SETTINGS (safe defaults)
# =============================

# Quadrature: log-spaced rings between r_inner and r_outer.
RINGS_PER_DECADE = int(os.getenv("RINGS_PER_DECADE", "16"))
ANGULAR_POINTS = int(os.getenv("ANGULAR_POINTS", "32"))
RADIAL_ORDER = int(os.getenv("RADIAL_ORDER", "3"))  # Gauss points per ring; 1 = midpoint
# How quadrature samples u between nodes: "cubic" or "linear" (monotone).
QUADRATURE_INTERPOLATION = os.getenv("QUADRATURE_INTERPOLATION", "cubic")

# Kernel class verification sampling (radii x angles; n=1 uses the two signs).
KERNEL_SAMPLE_RADII = int(os.getenv("KERNEL_SAMPLE_RADII", "64"))
KERNEL_SAMPLE_ANGLES = int(os.getenv("KERNEL_SAMPLE_ANGLES", "16"))
RHO0_L1 = float(os.getenv("RHO0_L1", "0.0625"))

# Dirichlet solver
SOLVER_TOL = float(os.getenv("SOLVER_TOL", "1e-8"))
SOLVER_MAX_ITER = int(os.getenv("SOLVER_MAX_ITER", "200000"))
SOLVER_DT_SAFETY = float(os.getenv("SOLVER_DT_SAFETY", "0.9"))
SOLVER_LOG_EVERY = int(os.getenv("SOLVER_LOG_EVERY", "1000"))

# Regularity measurements
OSC_SAMPLES_PER_RADIUS = int(os.getenv("OSC_SAMPLES_PER_RADIUS", "32"))
OSC_FLOOR = float(os.getenv("OSC_FLOOR", "1e-12"))

# ABP cover; 0 means "use 1/(128 sqrt n)".
ABP_RHO0 = float(os.getenv("ABP_RHO0", "0"))
ABP_C0 = float(os.getenv("ABP_C0", "1.0"))
ABP_CONSTANT = float(os.getenv("ABP_CONSTANT", "1.0"))

# Harness
LAB_SEED = int(os.getenv("LAB_SEED", "0"))
LAB_THREADS = int(os.getenv("LAB_THREADS", "1"))
LAB_LOG_LEVEL = os.getenv("LAB_LOG_LEVEL", "INFO")


# =============================
# Experiment files
# =============================

_LINE_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_.\-]*)\s*=\s*(.*?)\s*$")


def parse_config_text(text: str) -> dict[str, list[str]]:
    """Parse flat `key = value` text; repeated keys accumulate in order."""
    out: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE_RE.match(line)
        if not m:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = m.group(1), m.group(2)
        if value == "":
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        out.setdefault(key, []).append(value)
    return out


def load_config_file(path: str | os.PathLike) -> dict[str, list[str]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def _as_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: not a number: {value!r}") from exc


def _as_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: not an integer: {value!r}") from exc


def _as_bool(key: str, value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: not a boolean: {value!r}")


@dataclass
class ExperimentConfig:
    """Everything a recipe needs; built from file values plus CLI overrides."""

    recipe: str = "eval-suite"
    sigma: list[float] = field(default_factory=lambda: [1.0, 1.5, 1.9, 1.99])
    tau: list[float] = field(default_factory=list)
    lambda_lo: list[float] = field(default_factory=lambda: [1.0])
    lambda_hi: list[float] = field(default_factory=lambda: [2.0])
    b: list[float] = field(default_factory=list)
    dim: int = 1
    sigma0: float = 0.5
    tau0: float = 0.1
    m: float = 0.5
    A0: float = 1.0
    box_radius: float = 2.0
    spacing: float = 1.0 / 32.0
    quadrature: dict[str, float | int | bool] = field(default_factory=dict)
    out: Path = field(default_factory=pick_data_root)
    seed: int = LAB_SEED
    threads: int = LAB_THREADS
    solver_tol: float = SOLVER_TOL
    solver_max_iter: int = SOLVER_MAX_ITER
    extras: dict[str, list[str]] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, raw: dict[str, list[str]]) -> "ExperimentConfig":
        cfg = cls()
        raw = dict(raw)

        def pop_one(key):
            values = raw.pop(key, None)
            if values is None:
                return None
            if len(values) > 1:
                logger.debug("[config] %s given %d times; using the last", key, len(values))
            return values[-1]

        for key in ("sigma", "tau", "lambda_lo", "lambda_hi", "b"):
            values = raw.pop(key, None)
            if values is not None:
                setattr(cfg, key, [_as_float(key, v) for v in values])

        for key in ("sigma0", "tau0", "m", "A0", "box_radius", "spacing", "solver_tol"):
            v = pop_one(key)
            if v is not None:
                setattr(cfg, key, _as_float(key, v))

        for key in ("dim", "seed", "threads", "solver_max_iter"):
            v = pop_one(key)
            if v is not None:
                setattr(cfg, key, _as_int(key, v))

        v = pop_one("recipe")
        if v is not None:
            cfg.recipe = v
        v = pop_one("out")
        if v is not None:
            cfg.out = Path(v)

        for key in ("r_inner", "r_outer"):
            v = pop_one(key)
            if v is not None:
                cfg.quadrature[key] = _as_float(key, v)
        for key in ("rings_per_decade", "angular_points", "radial_order"):
            v = pop_one(key)
            if v is not None:
                cfg.quadrature[key] = _as_int(key, v)
        v = pop_one("taylor_inner")
        if v is not None:
            cfg.quadrature["taylor_inner"] = _as_bool("taylor_inner", v)
        v = pop_one("interpolation")
        if v is not None:
            if v not in ("linear", "cubic"):
                raise ConfigError(f"interpolation must be 'linear' or 'cubic', got {v!r}")
            cfg.quadrature["interpolation"] = v

        if cfg.dim not in (1, 2):
            raise ConfigError(f"dim must be 1 or 2, got {cfg.dim}")
        if cfg.spacing <= 0 or cfg.box_radius <= 0:
            raise ConfigError("box_radius and spacing must be positive")

        for key in sorted(raw):
            logger.debug("[config] passing through key %s", key)
        cfg.extras = raw
        return cfg

    def extra(self, key: str, default=None):
        values = self.extras.get(key)
        return values[-1] if values else default

    def extra_list(self, key: str) -> list[str]:
        return list(self.extras.get(key, []))

    def extra_float(self, key: str, default: float) -> float:
        v = self.extra(key)
        return default if v is None else _as_float(key, v)

    def extra_int(self, key: str, default: int) -> int:
        v = self.extra(key)
        return default if v is None else _as_int(key, v)
