"""Recurrent day-ahead load forecaster, one model per sector.

A single-layer LSTM reads a window of hourly features (the previous
day's own-sector loads plus calendar encodings) and a linear head maps
the final hidden state to 24 hourly forecasts.  Forecasts are produced
in kW, de-normalized from the model's per-sector min-max statistics and
clamped at zero.

Two training paths share the same unrolled network:

  * :func:`train_mse` runs full-batch gradient descent on the mean
    squared error in normalized space;
  * :func:`apply_external_gradient` takes a gradient of some outside
    objective with respect to the kW forecast (for example the scheduling
    cost) and performs one descent step through the clamp and the
    de-normalization.

The backward pass is exact reverse-mode differentiation of the unrolled
cell; clamped forecast slots contribute zero gradient.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit as _sigmoid

HORIZON = 24
FEATURES = ("load", "sin_hour", "cos_hour", "sin_dow", "cos_dow")
FORMAT_VERSION = 1


class ForecastError(ValueError):
    """Invalid forecaster input, configuration, or saved payload."""


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Normalization:
    """Min-max statistics of one sector's training loads."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ForecastError("normalization bounds must be finite")
        if self.hi < self.lo:
            raise ForecastError("normalization hi below lo")

    @property
    def span(self) -> float:
        # constant series would make scaling divide by zero
        width = self.hi - self.lo
        return width if width > 1e-12 else 1.0

    def scale(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.lo) / self.span

    def unscale(self, values: np.ndarray) -> np.ndarray:
        return self.lo + self.span * np.asarray(values, dtype=float)


def fit_normalization(values: np.ndarray) -> Normalization:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ForecastError("cannot fit normalization to an empty series")
    if not np.all(np.isfinite(arr)):
        raise ForecastError("loads must be finite to fit normalization")
    return Normalization(lo=float(arr.min()), hi=float(arr.max()))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LstmParams:
    """All weights of the network; also reused as the gradient container."""

    W_xf: np.ndarray
    W_xi: np.ndarray
    W_xo: np.ndarray
    W_xg: np.ndarray
    W_hf: np.ndarray
    W_hi: np.ndarray
    W_ho: np.ndarray
    W_hg: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_o: np.ndarray
    b_g: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        H = self.b_f.shape[0] if self.b_f.ndim == 1 else -1
        D = self.W_xf.shape[1] if self.W_xf.ndim == 2 else -1
        T = self.b_out.shape[0] if self.b_out.ndim == 1 else -1
        want = _field_shapes(H, D, T)
        for name in self.field_names():
            arr = getattr(self, name)
            if arr.shape != want[name]:
                raise ForecastError(
                    f"parameter {name} has shape {arr.shape}, "
                    f"expected {want[name]}")
            if not np.all(np.isfinite(arr)):
                raise ForecastError(f"parameter {name} is not finite")

    @classmethod
    def field_names(cls) -> tuple:
        return tuple(f.name for f in dataclasses.fields(cls))

    @property
    def hidden_size(self) -> int:
        return self.b_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_xf.shape[1]

    @property
    def horizon(self) -> int:
        return self.b_out.shape[0]


def _field_shapes(hidden: int, input_dim: int, horizon: int) -> dict:
    gate_x = (hidden, input_dim)
    gate_h = (hidden, hidden)
    bias = (hidden,)
    return {
        "W_xf": gate_x, "W_xi": gate_x, "W_xo": gate_x, "W_xg": gate_x,
        "W_hf": gate_h, "W_hi": gate_h, "W_ho": gate_h, "W_hg": gate_h,
        "b_f": bias, "b_i": bias, "b_o": bias, "b_g": bias,
        "W_out": (horizon, hidden), "b_out": (horizon,),
    }


def init_params(seed: int, hidden_size: int = 32,
                input_dim: int = len(FEATURES),
                horizon: int = HORIZON) -> LstmParams:
    """Seeded uniform init on [-1/sqrt(hidden), +1/sqrt(hidden)]."""
    if hidden_size < 1 or input_dim < 1 or horizon < 1:
        raise ForecastError("hidden_size, input_dim and horizon must be >= 1")
    rng = np.random.default_rng(seed)
    lim = 1.0 / math.sqrt(hidden_size)
    shapes = _field_shapes(hidden_size, input_dim, horizon)
    return LstmParams(**{name: rng.uniform(-lim, lim, shape)
                         for name, shape in shapes.items()})


# ---------------------------------------------------------------------------
# cell and unrolled forward pass
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LstmState:
    h: np.ndarray
    c: np.ndarray


def lstm_cell_forward(x: np.ndarray, state: LstmState,
                      params: LstmParams) -> tuple:
    """One recurrence step; returns the new state and the step output."""
    x = np.asarray(x, dtype=float)
    if x.shape != (params.input_dim,):
        raise ForecastError(f"input shape {x.shape} does not match "
                            f"expected shape ({params.input_dim},)")
    if state.h.shape != (params.hidden_size,) or state.h.shape != state.c.shape:
        raise ForecastError(f"state shape {state.h.shape}/{state.c.shape} "
                            f"does not match hidden size "
                            f"({params.hidden_size},)")
    f, i, o, g, c, tc, h = _step(params, x, state.h, state.c)
    new = LstmState(h=h, c=c)
    return new, h.copy()


def _step(params, x, h_prev, c_prev):
    f = _sigmoid(params.W_xf @ x + params.W_hf @ h_prev + params.b_f)
    i = _sigmoid(params.W_xi @ x + params.W_hi @ h_prev + params.b_i)
    o = _sigmoid(params.W_xo @ x + params.W_ho @ h_prev + params.b_o)
    g = np.tanh(params.W_xg @ x + params.W_hg @ h_prev + params.b_g)
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return f, i, o, g, c, tc, o * tc


def _unroll(params: LstmParams, window: np.ndarray):
    """Run the window through the cell; keep per-step values for backward."""
    H = params.hidden_size
    h = np.zeros(H)
    c = np.zeros(H)
    steps = []
    for t in range(window.shape[0]):
        x = window[t]
        f, i, o, g, c_new, tc, h_new = _step(params, x, h, c)
        steps.append((x, f, i, o, g, c, tc, h))
        h, c = h_new, c_new
    out = params.W_out @ h + params.b_out
    return steps, h, out


def _check_window(model: "ForecastModel", window: np.ndarray) -> np.ndarray:
    arr = np.asarray(window, dtype=float)
    want = (model.window, model.params.input_dim)
    if arr.ndim != 2 or arr.shape != want:
        raise ForecastError(f"expected window of shape {want}, "
                            f"got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ForecastError("window features must be finite")
    return arr


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForecastModel:
    """Trained network plus the statistics needed to leave model space."""

    params: LstmParams
    norm: Normalization
    window: int = HORIZON
    seed: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ForecastError("window must be >= 1")


def forward_day(model: ForecastModel, window: np.ndarray) -> np.ndarray:
    """Forecast 24 hourly loads in kW, clamped at zero."""
    arr = _check_window(model, window)
    _, _, out = _unroll(model.params, arr)
    raw = model.norm.unscale(out)
    return np.maximum(raw, 0.0)


def backward_day(model: ForecastModel, window: np.ndarray,
                 dloss_dforecast: np.ndarray) -> LstmParams:
    """Exact gradient of dloss_dforecast . forecast w.r.t. every parameter.

    Slots where the kW clamp is active pass no gradient.
    """
    arr = _check_window(model, window)
    dloss = np.asarray(dloss_dforecast, dtype=float)
    if dloss.shape != (model.params.horizon,):
        raise ForecastError(f"loss gradient shape {dloss.shape} does not "
                            f"match horizon ({model.params.horizon},)")
    if not np.all(np.isfinite(dloss)):
        raise ForecastError("loss gradient must be finite")
    steps, h_final, out = _unroll(model.params, arr)
    raw = model.norm.unscale(out)
    dout = np.where(raw > 0.0, dloss, 0.0) * model.norm.span
    return LstmParams(**_backward_from_head(model.params, steps, h_final,
                                            dout))


def _backward_from_head(params: LstmParams, steps, h_final, dout) -> dict:
    """Reverse-mode sweep from a gradient at the (normalized) head output."""
    g_acc = {name: np.zeros_like(getattr(params, name))
             for name in params.field_names()}
    g_acc["W_out"] = np.outer(dout, h_final)
    g_acc["b_out"] = dout.copy()
    dh = params.W_out.T @ dout
    dc = np.zeros(params.hidden_size)
    for x, f, i, o, g, c_prev, tc, h_prev in reversed(steps):
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        daf = dc * c_prev * f * (1.0 - f)
        dai = dc * g * i * (1.0 - i)
        dag = dc * i * (1.0 - g * g)
        dao = do * o * (1.0 - o)
        g_acc["W_xf"] += np.outer(daf, x)
        g_acc["W_xi"] += np.outer(dai, x)
        g_acc["W_xo"] += np.outer(dao, x)
        g_acc["W_xg"] += np.outer(dag, x)
        g_acc["W_hf"] += np.outer(daf, h_prev)
        g_acc["W_hi"] += np.outer(dai, h_prev)
        g_acc["W_ho"] += np.outer(dao, h_prev)
        g_acc["W_hg"] += np.outer(dag, h_prev)
        g_acc["b_f"] += daf
        g_acc["b_i"] += dai
        g_acc["b_o"] += dao
        g_acc["b_g"] += dag
        dh = (params.W_hf.T @ daf + params.W_hi.T @ dai
              + params.W_ho.T @ dao + params.W_hg.T @ dag)
        dc = dc * f
    return g_acc


def apply_external_gradient(model: ForecastModel, dloss_dforecast: np.ndarray,
                            window: np.ndarray, lr: float) -> ForecastModel:
    """One descent step against a gradient taken at the kW forecast."""
    if lr < 0.0 or not np.isfinite(lr):
        raise ForecastError("lr must be finite and >= 0")
    grads = backward_day(model, window, dloss_dforecast)
    stepped = LstmParams(**{
        name: getattr(model.params, name) - lr * getattr(grads, name)
        for name in LstmParams.field_names()})
    return dataclasses.replace(model, params=stepped)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def build_window(prev_loads: np.ndarray, day_of_week: int,
                 norm: Normalization,
                 window: Optional[int] = None) -> np.ndarray:
    """Feature matrix for one forecast day.

    Rows are the trailing `window` hours of the previous day: scaled load,
    cyclic hour-of-day encoding, cyclic day-of-week encoding.
    """
    loads = np.asarray(prev_loads, dtype=float)
    if loads.ndim != 1 or loads.size == 0:
        raise ForecastError("prev_loads must be a non-empty 1-D array")
    if not np.all(np.isfinite(loads)):
        raise ForecastError("prev_loads must be finite")
    w = loads.size if window is None else int(window)
    if not 1 <= w <= loads.size:
        raise ForecastError(f"window {w} exceeds the {loads.size} "
                            f"available hours")
    tail = loads[-w:]
    hours = np.arange(loads.size - w, loads.size, dtype=float)
    dow = int(day_of_week) % 7
    return np.column_stack([
        norm.scale(tail),
        np.sin(2.0 * np.pi * hours / 24.0),
        np.cos(2.0 * np.pi * hours / 24.0),
        np.full(w, np.sin(2.0 * np.pi * dow / 7.0)),
        np.full(w, np.cos(2.0 * np.pi * dow / 7.0)),
    ])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters shared by the pre-training and fine-tuning paths."""

    lr: float = 1e-3
    mse_epochs: int = 50
    e2e_epochs: int = 5
    e2e_lr: float = 1e-6
    window: int = HORIZON
    hidden_size: int = 32
    features: tuple = FEATURES
    normalization: Optional[Normalization] = None

    def __post_init__(self):
        if not (np.isfinite(self.lr) and self.lr > 0.0):
            raise ForecastError("lr must be positive")
        if not (np.isfinite(self.e2e_lr) and self.e2e_lr > 0.0):
            raise ForecastError("e2e_lr must be positive")
        if self.mse_epochs < 0 or self.e2e_epochs < 0:
            raise ForecastError("epoch counts must be >= 0")
        if self.window < 1:
            raise ForecastError("window must be >= 1")
        if self.hidden_size < 1:
            raise ForecastError("hidden_size must be >= 1")


def train_mse(loads: np.ndarray, day_of_week: np.ndarray,
              config: TrainingConfig, seed: int) -> tuple:
    """Full-batch gradient descent on normalized mean squared error.

    `loads` is (days, 24) in kW; day d is forecast from day d-1's window.
    Returns the trained model and the per-epoch loss trace.
    """
    loads = np.asarray(loads, dtype=float)
    dows = np.asarray(day_of_week, dtype=int)
    if loads.ndim != 2 or loads.shape[1] != HORIZON:
        raise ForecastError(f"loads must be (days, {HORIZON})")
    if not np.all(np.isfinite(loads)):
        raise ForecastError("loads must be finite")
    if dows.shape != (loads.shape[0],):
        raise ForecastError("day_of_week must have one entry per day")
    if loads.shape[0] < 2:
        raise ForecastError("need at least two days to form one "
                            "window/target pair")

    norm = config.normalization or fit_normalization(loads)
    windows = [build_window(loads[d - 1], int(dows[d - 1]), norm,
                            config.window)
               for d in range(1, loads.shape[0])]
    targets = [norm.scale(loads[d]) for d in range(1, loads.shape[0])]
    n = len(windows)

    params = init_params(seed, hidden_size=config.hidden_size,
                         input_dim=len(FEATURES))
    trace = np.zeros(config.mse_epochs)
    denom = float(n * HORIZON)
    for epoch in range(config.mse_epochs):
        total = {name: np.zeros_like(getattr(params, name))
                 for name in LstmParams.field_names()}
        loss = 0.0
        for window, y in zip(windows, targets):
            steps, h_final, out = _unroll(params, window)
            err = out - y
            loss += float(err @ err)
            sample = _backward_from_head(params, steps, h_final,
                                         2.0 * err / denom)
            for name in total:
                total[name] += sample[name]
        trace[epoch] = loss / denom
        params = LstmParams(**{
            name: getattr(params, name) - config.lr * total[name]
            for name in LstmParams.field_names()})
    model = ForecastModel(params=params, norm=norm, window=config.window,
                          seed=seed)
    return model, trace


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def forecast_metrics(forecast: np.ndarray, actual: np.ndarray) -> tuple:
    """(MAE, RMSE, MAPE) in kW, kW and percent."""
    f = np.asarray(forecast, dtype=float).ravel()
    a = np.asarray(actual, dtype=float).ravel()
    if f.shape != a.shape:
        raise ForecastError(f"length mismatch: {f.size} forecasts, "
                            f"{a.size} actuals")
    if f.size == 0:
        raise ForecastError("length zero: no samples to score")
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(a))):
        raise ForecastError("metrics need finite inputs")
    if np.any(a == 0.0):
        raise ForecastError("actual loads contain zero values; "
                            "percentage error is undefined")
    err = f - a
    mae = float(np.mean(np.abs(err)))
    rmse = float(math.sqrt(np.mean(err * err)))
    mape = float(100.0 * np.mean(np.abs(err / a)))
    return mae, rmse, mape


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_model(model: ForecastModel, path) -> None:
    """Write the model as a flat parameter vector plus shape metadata."""
    p = model.params
    flat = np.concatenate([getattr(p, name).ravel()
                           for name in LstmParams.field_names()])
    np.savez(path, format_version=np.array(FORMAT_VERSION), flat=flat,
             hidden_size=np.array(p.hidden_size),
             input_dim=np.array(p.input_dim),
             horizon=np.array(p.horizon),
             window=np.array(model.window),
             seed=np.array(model.seed),
             norm_lo=np.array(model.norm.lo),
             norm_hi=np.array(model.norm.hi))


def load_model(path) -> ForecastModel:
    with np.load(path) as z:
        missing = [k for k in ("format_version", "flat", "hidden_size",
                               "input_dim", "horizon", "window", "seed",
                               "norm_lo", "norm_hi") if k not in z.files]
        if missing:
            raise ForecastError(f"saved model is missing keys: {missing}")
        version = int(z["format_version"])
        if version != FORMAT_VERSION:
            raise ForecastError(f"unsupported format version {version}, "
                                f"expected {FORMAT_VERSION}")
        shapes = _field_shapes(int(z["hidden_size"]), int(z["input_dim"]),
                               int(z["horizon"]))
        flat = np.asarray(z["flat"], dtype=float)
        expected = sum(int(np.prod(s)) for s in shapes.values())
        if flat.size != expected:
            raise ForecastError(f"parameter payload length {flat.size}, "
                                f"expected {expected}")
        fields = {}
        at = 0
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            fields[name] = flat[at:at + size].reshape(shape)
            at += size
        norm = Normalization(lo=float(z["norm_lo"]), hi=float(z["norm_hi"]))
        return ForecastModel(params=LstmParams(**fields), norm=norm,
                             window=int(z["window"]), seed=int(z["seed"]))
