"""
Feedforward regressor used downstream of the encoder, plus the residual safeguard.

Networks are [Linear -> BatchNorm -> SiLU -> Dropout] blocks followed by a
linear head, trained in float64 on CPU with Adam on standardized targets.
"""
import copy
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from prometheus_client import Counter, Histogram
from torch import nn

from src.errors import ArtifactError, ConfigError, TrainingDivergenceError

logger = logging.getLogger(__name__)

# Prometheus metrics
MODELS_TRAINED = Counter('stein_encoder_models_trained', 'Number of regressors trained')
TRAINING_DURATION = Histogram('stein_encoder_training_seconds', 'Regressor training time in seconds')

CHECKPOINT_VERSION = 1
GRADIENT_STEP = 1e-5
DTYPE = torch.float64


@dataclass(frozen=True)
class MlpSpec:
    """Architecture and training schedule of one regressor."""

    input_dim: int
    hidden: Tuple[int, ...] = (128, 128, 128)
    batch_norm: bool = True
    dropout: float = 0.1
    epochs: int = 300
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    patience: int = 20
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'hidden', tuple(int(h) for h in self.hidden))
        if int(self.input_dim) < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        if any(h < 1 for h in self.hidden):
            raise ConfigError(f"Hidden widths must be positive, got {self.hidden}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.epochs < 1 or self.batch_size < 2 or self.patience < 1:
            raise ConfigError("epochs and patience must be >= 1 and batch_size >= 2")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be positive and weight_decay non-negative")
        if not 0.0 < self.validation_fraction < 0.5:
            raise ConfigError("validation_fraction must lie in (0, 0.5)")

    @classmethod
    def from_dict(cls, raw: Dict[str, Any], **overrides: Any) -> 'MlpSpec':
        values = {k: v for k, v in (raw or {}).items() if k in cls.__dataclass_fields__}
        values.update({k: v for k, v in overrides.items() if v is not None})
        values.setdefault('input_dim', 1)
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(f"Invalid regressor settings: {e}") from e

    def with_input_dim(self, input_dim: int, seed: Optional[int] = None) -> 'MlpSpec':
        return replace(self, input_dim=int(input_dim), seed=self.seed if seed is None else int(seed))

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values['hidden'] = list(self.hidden)
        return values


def build_network(spec: MlpSpec) -> nn.Sequential:
    layers: List[nn.Module] = []
    width = spec.input_dim
    for units in spec.hidden:
        layers.append(nn.Linear(width, units))
        if spec.batch_norm:
            layers.append(nn.BatchNorm1d(units))
        layers.append(nn.SiLU())
        if spec.dropout > 0:
            layers.append(nn.Dropout(spec.dropout))
        width = units
    layers.append(nn.Linear(width, 1))
    return nn.Sequential(*layers).to(DTYPE)


@dataclass(eq=False)
class MlpModel:
    """A trained network together with the feature/target scaling it was trained under."""

    spec: MlpSpec
    network: nn.Sequential
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0
    history: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def untrained(cls, spec: MlpSpec) -> 'MlpModel':
        """Freshly initialized network with identity scaling."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            network = build_network(spec)
        network.eval()
        return cls(spec, network, np.zeros(spec.input_dim), np.ones(spec.input_dim))

    @property
    def target_scale(self) -> float:
        # a constant target trains on zeros and predicts its mean exactly
        return self.y_std if self.y_std > 0 else 1.0

    def scale_features(self, features: np.ndarray) -> torch.Tensor:
        features = np.asarray(features, dtype=float)
        if features.ndim != 2 or features.shape[1] != self.spec.input_dim:
            width = features.shape[1] if features.ndim == 2 else features.ndim
            raise ConfigError(f"Model expects {self.spec.input_dim} features, got {width}")
        return torch.as_tensor((features - self.x_mean) / self.x_std, dtype=DTYPE)

    def scale_target(self, y: np.ndarray) -> torch.Tensor:
        return torch.as_tensor((np.asarray(y, dtype=float) - self.y_mean) / self.target_scale, dtype=DTYPE)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return predict(self, features)

    def save(self, path: str) -> None:
        checkpoint = {
            'format_version': CHECKPOINT_VERSION,
            'spec': self.spec.to_dict(),
            'scaling': {
                'x_mean': [float(v) for v in self.x_mean],
                'x_std': [float(v) for v in self.x_std],
                'y_mean': float(self.y_mean),
                'y_std': float(self.y_std),
            },
            'state_dict': self.network.state_dict(),
            'history': self.history,
        }
        torch.save(checkpoint, path)
        logger.info(f"Saved regressor checkpoint to {path}")

    @classmethod
    def load(cls, path: str) -> 'MlpModel':
        try:
            checkpoint = torch.load(path, map_location='cpu', weights_only=True)
        except (OSError, RuntimeError, EOFError) as e:
            raise ArtifactError(f"Cannot read regressor checkpoint {path}: {e}") from e
        if not isinstance(checkpoint, dict) or checkpoint.get('format_version') != CHECKPOINT_VERSION:
            raise ArtifactError(f"{path} is not a version-{CHECKPOINT_VERSION} regressor checkpoint")
        spec = MlpSpec.from_dict(checkpoint['spec'])
        network = build_network(spec)
        try:
            network.load_state_dict(checkpoint['state_dict'])
        except RuntimeError as e:
            raise ArtifactError(f"Checkpoint weights do not match its spec: {e}") from e
        network.eval()
        scaling = checkpoint['scaling']
        return cls(
            spec=spec,
            network=network,
            x_mean=np.asarray(scaling['x_mean'], dtype=float),
            x_std=np.asarray(scaling['x_std'], dtype=float),
            y_mean=float(scaling['y_mean']),
            y_std=float(scaling['y_std']),
            history=dict(checkpoint.get('history', {})),
        )


class _single_thread:
    def __enter__(self):
        self.previous = torch.get_num_threads()
        torch.set_num_threads(1)

    def __exit__(self, *exc):
        torch.set_num_threads(self.previous)


def train(features: np.ndarray, y: np.ndarray, spec: MlpSpec) -> MlpModel:
    """
    Minimize mean squared error on standardized targets with early stopping.

    Args:
        features: n x input_dim matrix; standardized internally with training-split statistics.
        y: Response vector of length n.
        spec: Architecture and schedule; training is deterministic given spec.seed.

    Returns:
        MlpModel restored to the epoch with the lowest validation loss.
    """
    features = np.asarray(features, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n = features.shape[0]
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise ConfigError(f"Training features must be n x {spec.input_dim}")
    if y.shape[0] != n:
        raise ConfigError(f"Response length {y.shape[0]} does not match {n} rows")
    if n < 2 * spec.batch_size:
        raise ConfigError(f"Training needs at least {2 * spec.batch_size} rows, got {n}")

    started = time.perf_counter()
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(n)
    n_val = max(2, int(round(n * spec.validation_fraction)))
    val_idx, fit_idx = order[:n_val], order[n_val:]

    x_std = features[fit_idx].std(axis=0)
    model = MlpModel(
        spec=spec,
        network=nn.Sequential(),
        x_mean=features[fit_idx].mean(axis=0),
        x_std=np.where(x_std > 1e-12, x_std, 1.0),
        y_mean=float(y[fit_idx].mean()),
        y_std=float(y[fit_idx].std()),
    )
    xt = model.scale_features(features)
    yt = model.scale_target(y)
    x_fit, y_fit = xt[fit_idx], yt[fit_idx]
    x_val, y_val = xt[val_idx], yt[val_idx]

    train_losses: List[float] = []
    val_losses: List[float] = []
    with _single_thread(), torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        network = build_network(spec)
        optimizer = torch.optim.Adam(network.parameters(), lr=spec.learning_rate,
                                     weight_decay=spec.weight_decay)
        loss_fn = nn.MSELoss()
        best_val, best_epoch, stale = float('inf'), 0, 0
        best_state = copy.deepcopy(network.state_dict())

        for epoch in range(1, spec.epochs + 1):
            network.train()
            running, seen = 0.0, 0
            shuffle = rng.permutation(len(fit_idx))
            for start in range(0, len(fit_idx), spec.batch_size):
                batch = shuffle[start:start + spec.batch_size]
                if len(batch) < 2:
                    # batch norm needs two rows in training mode
                    continue
                optimizer.zero_grad()
                loss = loss_fn(network(x_fit[batch]).squeeze(-1), y_fit[batch])
                loss.backward()
                optimizer.step()
                running += float(loss.item()) * len(batch)
                seen += len(batch)
            train_loss = running / max(seen, 1)

            network.eval()
            with torch.no_grad():
                val_loss = float(loss_fn(network(x_val).squeeze(-1), y_val).item())
            if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
                raise TrainingDivergenceError(f"Training loss became non-finite at epoch {epoch}", epoch=epoch)
            train_losses.append(train_loss)
            val_losses.append(val_loss)

            if val_loss < best_val:
                best_val, best_epoch, stale = val_loss, epoch, 0
                best_state = copy.deepcopy(network.state_dict())
            else:
                stale += 1
                if stale >= spec.patience:
                    break

    network.load_state_dict(best_state)
    network.eval()
    model.network = network
    model.history = {'train_loss': train_losses, 'val_loss': val_losses,
                     'best_epoch': best_epoch, 'epochs_run': len(train_losses)}
    elapsed = time.perf_counter() - started
    MODELS_TRAINED.inc()
    TRAINING_DURATION.observe(elapsed)
    logger.debug(f"Trained {spec.hidden} network on {n} rows: best epoch {best_epoch}, val loss {best_val:.4g}")
    return model


def predict(model: MlpModel, features: np.ndarray) -> np.ndarray:
    """Evaluation-mode forward pass on the original response scale."""
    features = np.asarray(features, dtype=float)
    if features.ndim == 2 and features.shape[0] == 0 and features.shape[1] == model.spec.input_dim:
        return np.empty(0)
    xt = model.scale_features(features)
    model.network.eval()
    with torch.no_grad():
        out = model.network(xt).squeeze(-1).numpy()
    return model.y_mean + model.y_std * out


def _loss(model: MlpModel, xt: torch.Tensor, yt: torch.Tensor) -> torch.Tensor:
    return torch.mean((model.network(xt).squeeze(-1) - yt) ** 2)


def loss_gradients(model: MlpModel, features: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Analytic gradient of the standardized-target MSE, parameters flattened in network order."""
    model.network.eval()
    xt, yt = model.scale_features(features), model.scale_target(y)
    params = list(model.network.parameters())
    grads = torch.autograd.grad(_loss(model, xt, yt), params)
    return torch.cat([g.reshape(-1) for g in grads]).detach().numpy()


def gradient_check(model: MlpModel, features: np.ndarray, y: np.ndarray,
                   n_params: int = 100, step: float = GRADIENT_STEP, seed: int = 0) -> float:
    """
    Largest relative error between analytic and central-difference gradients.

    Relative error is |a - f| / max(|a|, |f|, 1e-6) over a random sample of
    at most n_params parameters. The network is evaluated in eval mode.
    """
    analytic = loss_gradients(model, features, y)
    xt, yt = model.scale_features(features), model.scale_target(y)
    params = list(model.network.parameters())
    sizes = [p.numel() for p in params]
    offsets = np.cumsum([0] + sizes)
    rng = np.random.default_rng(seed)
    picked = rng.choice(offsets[-1], size=min(n_params, int(offsets[-1])), replace=False)

    worst = 0.0
    with torch.no_grad():
        for flat in picked:
            which = int(np.searchsorted(offsets, flat, side='right') - 1)
            view = params[which].view(-1)
            local = int(flat - offsets[which])
            original = float(view[local])
            view[local] = original + step
            plus = float(_loss(model, xt, yt))
            view[local] = original - step
            minus = float(_loss(model, xt, yt))
            view[local] = original
            numeric = (plus - minus) / (2.0 * step)
            a = float(analytic[flat])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-6))
    return worst


@dataclass(eq=False)
class SafeguardedRegressor:
    """h(X, t) + alpha * r(X, Z) with alpha in {0, 1}."""

    main: MlpModel
    residual: Optional[MlpModel]
    alpha: int
    validation: Dict[str, float] = field(default_factory=dict)

    def predict(self, x: np.ndarray, z: np.ndarray, t: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        stage1 = self.main.predict(np.column_stack([x, np.asarray(t, dtype=float)]))
        if self.alpha == 0 or self.residual is None:
            return stage1
        return stage1 + self.residual.predict(np.column_stack([x, np.asarray(z, dtype=float)]))


def fit_with_safeguard(x: np.ndarray, z: np.ndarray, t_hat: np.ndarray, y: np.ndarray,
                       spec_main: MlpSpec, spec_resid: MlpSpec, gate_fraction: float = 0.2,
                       min_improvement: float = 0.01, seed: int = 0) -> SafeguardedRegressor:
    """
    Two-stage fit: h on (X, t_hat), then r on (X, Z) against the residuals of h.

    A held-out gating split decides alpha: the residual net is kept only when
    it lowers the gating MSE by at least min_improvement (relative). The kept
    stages are then retrained on all rows.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    t_hat = np.asarray(t_hat, dtype=float).reshape(-1, 1)
    y = np.asarray(y, dtype=float).reshape(-1)
    n = y.shape[0]
    if x.shape[0] != n or z.shape[0] != n or t_hat.shape[0] != n:
        raise ConfigError("x, z, t_hat and y must have the same number of rows")
    if not 0.0 < gate_fraction < 0.5:
        raise ConfigError("gate_fraction must lie in (0, 0.5)")

    order = np.random.default_rng(seed).permutation(n)
    n_gate = max(2, int(round(n * gate_fraction)))
    gate, fit_rows = order[:n_gate], order[n_gate:]

    main_features = np.column_stack([x, t_hat])
    resid_features = np.column_stack([x, z])
    main = train(main_features[fit_rows], y[fit_rows], spec_main.with_input_dim(main_features.shape[1]))
    residual_target = y[fit_rows] - main.predict(main_features[fit_rows])
    residual = train(resid_features[fit_rows], residual_target, spec_resid.with_input_dim(resid_features.shape[1]))

    stage1 = main.predict(main_features[gate])
    combined = stage1 + residual.predict(resid_features[gate])
    mse_stage1 = float(np.mean((y[gate] - stage1) ** 2))
    mse_combined = float(np.mean((y[gate] - combined) ** 2))
    alpha = 1 if mse_combined <= (1.0 - min_improvement) * mse_stage1 else 0
    logger.info(f"Safeguard gate: stage-1 MSE {mse_stage1:.4g}, combined {mse_combined:.4g}, alpha={alpha}")

    # refit the chosen stages on every row
    main = train(main_features, y, spec_main.with_input_dim(main_features.shape[1]))
    residual = None
    if alpha == 1:
        residual = train(resid_features, y - main.predict(main_features),
                         spec_resid.with_input_dim(resid_features.shape[1]))
    return SafeguardedRegressor(
        main=main,
        residual=residual,
        alpha=alpha,
        validation={'mse_stage1': mse_stage1, 'mse_combined': mse_combined, 'rows': int(n_gate),
                    'refit_rows': int(n)},
    )
