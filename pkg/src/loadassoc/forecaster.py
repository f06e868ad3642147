"""
Day-ahead load forecaster: calendar embedding -> two 1-D convolutions ->
stacked GRU -> bias-free dense head producing one value per forecast slot.

Everything is plain numpy in float64 with hand-written backpropagation, so
gradients can be checked against finite differences.

Sample layout: for target day ``d`` and window ``w`` days the input has
``w * slots`` steps. Step ``p`` stands for slot ``p % slots`` of day
``d - w + 1 + p // slots`` and carries the features *for* that slot: the
load the same slot ``L`` days earlier for every selected lag ``L``, the
weather of that slot, and its calendar ids. The last ``slots`` steps are the
target day itself, whose lag-1 load is yesterday.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import HouseholdDataset, NormalizationParams, WeatherSeries, fit_normalizer
from .features import daily_matrix, daily_weather

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
N_DOW = 7
N_HOLIDAY = 2


@dataclass(frozen=True)
class ModelConfig:
    conv1_filters: int = 16
    conv2_filters: int = 64
    gru_units: int = 32
    gru_layers: int = 1
    kernel_size: int = 3
    embed_dim: int = 4
    input_window_days: int = 7
    output_slots: int = 12

    def __post_init__(self):
        for k, v in asdict(self).items():
            if int(v) < 1:
                raise ValueError(f"ModelConfig.{k} must be positive, got {v}")
        if self.seq_len < 1:
            raise ValueError("input window too short for two valid convolutions")

    @property
    def seq_len(self) -> int:
        """GRU sequence length after two valid convolutions."""
        return self.output_slots * self.input_window_days - 2 * (self.kernel_size - 1)


# The light configuration serves the cluster models, the heavy one the overall model.
SMALL = ModelConfig(conv1_filters=16, conv2_filters=64, gru_units=32, gru_layers=1)
LARGE = ModelConfig(conv1_filters=32, conv2_filters=128, gru_units=64, gru_layers=3)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    clip_norm: float = 5.0
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _conv_forward(x, w, b):
    k = w.shape[0]
    t_out = x.shape[1] - k + 1
    cols = np.concatenate([x[:, j:j + t_out] for j in range(k)], axis=2)
    return cols @ w.reshape(-1, w.shape[2]) + b, cols


def _conv_backward(dout, cols, w, in_shape):
    k, c, f = w.shape
    t_out = dout.shape[1]
    dw = (cols.reshape(-1, k * c).T @ dout.reshape(-1, f)).reshape(k, c, f)
    db = dout.sum(axis=(0, 1))
    dcols = dout @ w.reshape(k * c, f).T
    dx = np.zeros(in_shape)
    for j in range(k):
        dx[:, j:j + t_out] += dcols[:, :, j * c:(j + 1) * c]
    return dx, dw, db


def _gru_forward(x, W, U, b):
    """Run one GRU layer over ``x`` (B, T, I); gates ordered [update, reset, candidate]."""
    B, T, _ = x.shape
    H = U.shape[0]
    xw = x @ W + b
    hs = np.zeros((B, T + 1, H))
    z_all = np.empty((B, T, H))
    r_all = np.empty((B, T, H))
    c_all = np.empty((B, T, H))
    U_zr, U_c = U[:, :2 * H], U[:, 2 * H:]
    for t in range(T):
        h = hs[:, t]
        zr = _sigmoid(xw[:, t, :2 * H] + h @ U_zr)
        z, r = zr[:, :H], zr[:, H:]
        c = np.tanh(xw[:, t, 2 * H:] + (r * h) @ U_c)
        hs[:, t + 1] = (1.0 - z) * h + z * c
        z_all[:, t], r_all[:, t], c_all[:, t] = z, r, c
    return hs[:, 1:], (x, hs, z_all, r_all, c_all)


def _gru_backward(dout, cache, W, U):
    x, hs, z_all, r_all, c_all = cache
    B, T, H = dout.shape
    U_z, U_r, U_c = U[:, :H], U[:, H:2 * H], U[:, 2 * H:]
    dU = np.zeros_like(U)
    dG = np.empty((B, T, 3 * H))
    dh_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        h = hs[:, t]
        z, r, c = z_all[:, t], r_all[:, t], c_all[:, t]
        dh = dout[:, t] + dh_next
        dg_c = dh * z * (1.0 - c * c)
        rh = r * h
        dU[:, 2 * H:] += rh.T @ dg_c
        d_rh = dg_c @ U_c.T
        dg_z = dh * (c - h) * z * (1.0 - z)
        dg_r = d_rh * h * r * (1.0 - r)
        dU[:, :H] += h.T @ dg_z
        dU[:, H:2 * H] += h.T @ dg_r
        dh_next = dh * (1.0 - z) + d_rh * r + dg_z @ U_z.T + dg_r @ U_r.T
        dG[:, t, :H], dG[:, t, H:2 * H], dG[:, t, 2 * H:] = dg_z, dg_r, dg_c
    flat = dG.reshape(-1, 3 * H)
    dW = x.reshape(-1, x.shape[2]).T @ flat
    db = flat.sum(axis=0)
    dx = dG @ W.T
    return dx, dW, dU, db


class ForecastModel:
    """Parameters, normalization constants and forward/backward passes of one forecaster."""

    def __init__(self, config: ModelConfig, features: Sequence[str], params: dict[str, np.ndarray],
                 load_norm: NormalizationParams, weather_norm: NormalizationParams, name: str = "model"):
        self.config = config
        self.features = list(features)
        self.params = params
        self.load_norm = load_norm
        self.weather_norm = weather_norm
        self.name = name
        self._check_shapes()

    # ---------------------------------------------------------- structure
    @property
    def lags(self) -> list[int]:
        return [int(f[4:-1]) for f in self.features if f.startswith("lag_")]

    @property
    def weather_fields(self) -> list[str]:
        return [f for f in self.features if f in WeatherSeries.FIELDS]

    @property
    def n_numeric(self) -> int:
        return len(self.lags) + len(self.weather_fields)

    @property
    def n_inputs(self) -> int:
        return self.n_numeric + self.config.embed_dim

    @property
    def history_days(self) -> int:
        """First target day index that has a complete input window."""
        return self.config.input_window_days - 1 + max(self.lags, default=0)

    @staticmethod
    def param_shapes(config: ModelConfig, n_inputs: int) -> dict[str, tuple[int, ...]]:
        c = config
        shapes = {
            "emb_dow": (N_DOW, c.embed_dim),
            "emb_slot": (c.output_slots, c.embed_dim),
            "emb_holiday": (N_HOLIDAY, c.embed_dim),
            "conv1_w": (c.kernel_size, n_inputs, c.conv1_filters),
            "conv1_b": (c.conv1_filters,),
            "conv2_w": (c.kernel_size, c.conv1_filters, c.conv2_filters),
            "conv2_b": (c.conv2_filters,),
        }
        size_in = c.conv2_filters
        for layer in range(c.gru_layers):
            shapes[f"gru{layer}_W"] = (size_in, 3 * c.gru_units)
            shapes[f"gru{layer}_U"] = (c.gru_units, 3 * c.gru_units)
            shapes[f"gru{layer}_b"] = (3 * c.gru_units,)
            size_in = c.gru_units
        shapes["head_w"] = (c.gru_units, c.output_slots)
        return shapes

    def _check_shapes(self):
        expected = self.param_shapes(self.config, self.n_inputs)
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names {sorted(self.params)} do not match {sorted(expected)}")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")

    @classmethod
    def initialize(cls, config: ModelConfig, features: Sequence[str], seed: int,
                   load_norm: NormalizationParams | None = None,
                   weather_norm: NormalizationParams | None = None, name: str = "model") -> "ForecastModel":
        """Uniform(+-1/sqrt(fan_in)) initialization from a seeded generator."""
        rng = np.random.default_rng(seed)
        tmp_features = list(features)
        n_numeric = sum(1 for f in tmp_features if f.startswith("lag_") or f in WeatherSeries.FIELDS)
        n_inputs = n_numeric + config.embed_dim
        fan_in = {
            "conv1": config.kernel_size * n_inputs,
            "conv2": config.kernel_size * config.conv1_filters,
            "gru": config.gru_units,
            "head": config.gru_units,
        }
        params = {}
        for k, shape in cls.param_shapes(config, n_inputs).items():
            if k.startswith("emb"):
                bound = 1.0
            elif k.startswith("conv"):
                bound = 1.0 / np.sqrt(fan_in[k[:5]])
            elif k.startswith("gru"):
                bound = 1.0 / np.sqrt(fan_in["gru"])
            else:
                bound = 1.0 / np.sqrt(fan_in["head"])
            params[k] = rng.uniform(-bound, bound, size=shape)
        if load_norm is None:
            load_norm = NormalizationParams(np.array([0.0]), np.array([1.0]))
        if weather_norm is None:
            weather_norm = NormalizationParams(np.zeros(3), np.ones(3))
        return cls(config, features, params, load_norm, weather_norm, name)

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # ------------------------------------------------------------ passes
    def forward(self, x: np.ndarray, cal: np.ndarray, keep_cache: bool = False):
        """Map (B, T, n_numeric) inputs and (B, T, 3) calendar ids to (B, slots) normalized loads."""
        p = self.params
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x, cal = x[None], np.asarray(cal)[None]
        emb = p["emb_dow"][cal[..., 0]] + p["emb_slot"][cal[..., 1]] + p["emb_holiday"][cal[..., 2]]
        h0 = np.concatenate([x, emb], axis=2)
        c1, cols1 = _conv_forward(h0, p["conv1_w"], p["conv1_b"])
        a1 = np.maximum(c1, 0.0)
        c2, cols2 = _conv_forward(a1, p["conv2_w"], p["conv2_b"])
        seq = np.maximum(c2, 0.0)
        gru_caches = []
        for layer in range(self.config.gru_layers):
            seq, gc = _gru_forward(seq, p[f"gru{layer}_W"], p[f"gru{layer}_U"], p[f"gru{layer}_b"])
            gru_caches.append(gc)
        last = seq[:, -1]
        y = last @ p["head_w"]
        if single:
            y = y[0]
        if not keep_cache:
            return y
        cache = dict(cal=cal, h0_shape=h0.shape, cols1=cols1, c1=c1, a1_shape=a1.shape, cols2=cols2, c2=c2,
                     gru=gru_caches, last=last, seq_shape=seq.shape)
        return y, cache

    def backward(self, cache: dict, dy: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given dL/dy for the batch in ``cache``."""
        p = self.params
        cfg = self.config
        dy = np.atleast_2d(dy)
        grads = {"head_w": cache["last"].T @ dy}
        dlast = dy @ p["head_w"].T
        dseq = np.zeros(cache["seq_shape"])
        dseq[:, -1] = dlast
        for layer in reversed(range(cfg.gru_layers)):
            W, U = p[f"gru{layer}_W"], p[f"gru{layer}_U"]
            dseq, grads[f"gru{layer}_W"], grads[f"gru{layer}_U"], grads[f"gru{layer}_b"] = _gru_backward(
                dseq, cache["gru"][layer], W, U)
        dc2 = dseq * (cache["c2"] > 0)
        da1, grads["conv2_w"], grads["conv2_b"] = _conv_backward(dc2, cache["cols2"], p["conv2_w"], cache["a1_shape"])
        dc1 = da1 * (cache["c1"] > 0)
        dh0, grads["conv1_w"], grads["conv1_b"] = _conv_backward(dc1, cache["cols1"], p["conv1_w"], cache["h0_shape"])
        demb = dh0[:, :, self.n_numeric:]
        cal = cache["cal"]
        for name, col in (("emb_dow", 0), ("emb_slot", 1), ("emb_holiday", 2)):
            g = np.zeros_like(p[name])
            np.add.at(g, cal[..., col].ravel(), demb.reshape(-1, cfg.embed_dim))
            grads[name] = g
        return grads

    def loss(self, x, cal, y) -> float:
        pred = self.forward(x, cal)
        with np.errstate(over="ignore"):
            return float(np.mean((pred - y) ** 2))

    def loss_and_grads(self, x, cal, y) -> tuple[float, dict[str, np.ndarray]]:
        pred, cache = self.forward(x, cal, keep_cache=True)
        diff = pred - y
        with np.errstate(over="ignore"):
            loss = float(np.mean(diff ** 2))
        return loss, self.backward(cache, 2.0 * diff / diff.size)

    def predict(self, x, cal) -> np.ndarray:
        """Denormalized, nonnegative loads (watts)."""
        return denormalize_output(self, self.forward(x, cal))

    # ------------------------------------------------------------ storage
    def metadata(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "name": self.name,
            "config": asdict(self.config),
            "features": self.features,
            "load_norm": self.load_norm.to_dict(),
            "weather_norm": self.weather_norm.to_dict(),
        }

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        """Write all tensors plus a JSON metadata record into one ``.npz`` file."""
        meta = self.metadata()
        if extra:
            meta.update(extra)
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 **self.params)
        path = Path(path)
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path: str | Path) -> tuple["ForecastModel", dict]:
        with np.load(path) as npz:
            meta = json.loads(npz["__meta__"].tobytes().decode())
            params = {k: npz[k].copy() for k in npz.files if k != "__meta__"}
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        model = cls(ModelConfig(**meta["config"]), meta["features"], params,
                    NormalizationParams.from_dict(meta["load_norm"]),
                    NormalizationParams.from_dict(meta["weather_norm"]), meta.get("name", "model"))
        return model, meta


def denormalize_output(model: ForecastModel, z: np.ndarray) -> np.ndarray:
    return np.maximum(model.load_norm.invert(z), 0.0)


# ------------------------------------------------------------------ samples

@dataclass
class ForecastFrame:
    """Forecast-grid view of one target load plus weather and calendar, indexed by day."""

    load: np.ndarray
    weather: np.ndarray
    day_of_week: np.ndarray
    is_holiday: np.ndarray

    @property
    def days(self) -> int:
        return self.load.shape[0]

    @property
    def slots(self) -> int:
        return self.load.shape[1]

    @classmethod
    def from_dataset(cls, dataset: HouseholdDataset, power: np.ndarray, slots_per_day: int = 12) -> "ForecastFrame":
        return cls(daily_matrix(power, dataset, slots_per_day), daily_weather(dataset, slots_per_day),
                   dataset.calendar.day_of_week.copy(), dataset.calendar.is_holiday.copy())


def build_sample(frame: ForecastFrame, model: ForecastModel, day: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (numeric inputs (T, n_numeric), calendar ids (T, 3), normalized target (slots,))."""
    cfg = model.config
    w, s = cfg.input_window_days, frame.slots
    if s != cfg.output_slots:
        raise ValueError(f"frame has {s} slots/day, model expects {cfg.output_slots}")
    if day < model.history_days:
        raise ValueError(f"day {day} lacks history: need {model.history_days} earlier days")
    if day >= frame.days:
        raise ValueError(f"day {day} beyond data ({frame.days} days)")
    days = np.arange(day - w + 1, day + 1)
    cols = [model.load_norm.apply(frame.load[days - L]).reshape(-1) for L in model.lags]
    fields = list(WeatherSeries.FIELDS)
    wnorm = model.weather_norm.apply(frame.weather[days].reshape(-1, len(fields)))
    cols += [wnorm[:, fields.index(f)] for f in model.weather_fields]
    x = np.column_stack(cols) if cols else np.zeros((w * s, 0))
    cal = np.column_stack([
        np.repeat(frame.day_of_week[days], s),
        np.tile(np.arange(s), w),
        np.repeat(frame.is_holiday[days].astype(np.int64), s),
    ])
    target = model.load_norm.apply(frame.load[day])
    return x, cal, np.asarray(target, dtype=np.float64).reshape(-1)


def build_samples(frame: ForecastFrame, model: ForecastModel, days: Sequence[int]):
    parts = [build_sample(frame, model, d) for d in days]
    return (np.stack([p[0] for p in parts]), np.stack([p[1] for p in parts]), np.stack([p[2] for p in parts]))


def fit_normalizers(frame: ForecastFrame, train_days: Sequence[int]) -> tuple[NormalizationParams, NormalizationParams]:
    idx = np.asarray(train_days)
    load_norm = fit_normalizer(frame.load[idx].reshape(-1))
    weather_norm = fit_normalizer(frame.weather[idx].reshape(-1, frame.weather.shape[2]))
    return load_norm, weather_norm


# ----------------------------------------------------------------- training

def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        corr1 = 1.0 - c.beta1 ** self.t
        corr2 = 1.0 - c.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            params[k] -= c.learning_rate * (self.m[k] / corr1) / (np.sqrt(self.v[k] / corr2) + c.eps)


def train(model: ForecastModel, x: np.ndarray, cal: np.ndarray, y: np.ndarray,
          cfg: TrainConfig = TrainConfig()) -> TrainHistory:
    """Mini-batch Adam with early stopping on the chronological validation tail.

    The model ends up holding its best-validation parameters.
    """
    n = len(y)
    if n == 0:
        raise ValueError("empty training set")
    n_val = int(round(n * cfg.val_fraction)) if n >= 10 else 0
    n_tr = n - n_val
    tr = slice(0, n_tr)
    va = slice(n_tr, n)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg)
    hist = TrainHistory()
    best, best_params, stale = np.inf, model.copy_params(), 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n_tr)
        for lo in range(0, n_tr, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss, grads = model.loss_and_grads(x[idx], cal[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            clip_gradients(grads, cfg.clip_norm)
            opt.step(model.params, grads)
        tr_loss = model.loss(x[tr], cal[tr], y[tr])
        va_loss = model.loss(x[va], cal[va], y[va]) if n_val else tr_loss
        if not (np.isfinite(tr_loss) and np.isfinite(va_loss)):
            raise TrainingDiverged(epoch, tr_loss)
        hist.train_loss.append(tr_loss)
        hist.val_loss.append(va_loss)
        if va_loss < best:
            best, best_params, stale = va_loss, model.copy_params(), 0
            hist.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                log.debug("%s: early stop at epoch %d (best %d)", model.name, epoch, hist.best_epoch)
                break
    model.params = best_params
    return hist


def fit_forecaster(frame: ForecastFrame, features: Sequence[str], config: ModelConfig, train_cfg: TrainConfig,
                   train_end: int, name: str = "model") -> tuple[ForecastModel, TrainHistory]:
    """Fit normalizers on days before ``train_end``, initialize, and train on every usable day."""
    model = ForecastModel.initialize(config, features, train_cfg.seed, name=name)
    days = list(range(model.history_days, train_end))
    if not days:
        raise ValueError(f"no training day has {model.history_days} days of history before day {train_end}")
    model.load_norm, model.weather_norm = fit_normalizers(frame, range(train_end))
    x, cal, y = build_samples(frame, model, days)
    hist = train(model, x, cal, y, train_cfg)
    return model, hist


def predict_day_ahead(model: ForecastModel, frame: ForecastFrame, day: int) -> np.ndarray:
    """Day-ahead loads (watts, clamped at zero) for every slot of ``day``."""
    x, cal, _ = build_sample(frame, model, day)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"inputs for day {day} are incomplete")
    return model.predict(x, cal)
