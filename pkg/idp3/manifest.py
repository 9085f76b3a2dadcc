"""
Run manifests: flat `key = value` files that fully determine a run.

    # iDP3 default, desk scale
    variant = conv_pyramid_idp3
    target_points = 1024
    h_pred = 16
    widths = 64, 128, 256

Keys are the field names of `RunManifest`. A grid manifest may also carry
`grid.variant`, `grid.target_points`, `grid.h_pred` and `grid.data_seeds`,
each a comma-separated list.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
import itertools
import logging
from pathlib import Path
import typing
from typing import Any, Iterator

from .diffusion import DenoiserConfig
from .encoders import EncoderConfig, EncoderVariant
from .perception import ObservationConfig
from .sampling import SamplingConfig
from .sim import JitterConfig, SceneConfig, SensorNoise
from .tensornet import ACTIVATIONS, AdamWConfig
from .utils import content_hash


logger = logging.getLogger(__name__)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class RunManifest:
    # Policy
    variant: str = 'conv_pyramid_idp3'
    target_points: int = 1024
    voxel_size: float = 0.02
    widths: tuple[int, ...] = (64, 128, 256)
    embedding_dim: int = 128
    activation: str = 'relu'
    image_grid: int = 64
    image_random_crop: int = 4
    h_pred: int = 16
    h_obs: int = 2
    h_act: int = 8
    schedule: str = 'cosine'
    t_train: int = 50
    t_infer: int = 10
    denoiser_hidden: tuple[int, ...] = (256, 256)
    time_dim: int = 32

    # Optimization
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    checkpoint_every: int = 0

    # Demonstrations
    n_demos: int = 50
    rounds_per_demo: int = 1
    jitter_theta: float = 0.3
    jitter_sigma: float = 0.01
    render_resolution: int = 64
    noise_sigma: float = 0.005
    noise_dropout: float = 0.02

    # Evaluation
    eval_episodes: int = 50
    eval_steps: int = 400
    eval_rounds: int = 10

    # Sampler benchmark
    bench_points: int = 50_000
    bench_repetitions: int = 21

    # Seeds
    data_seed: int = 0
    train_seed: int = 0
    eval_seed: int = 1000

    DATA_KEYS = (
        'n_demos', 'rounds_per_demo', 'jitter_theta', 'jitter_sigma',
        'render_resolution', 'noise_sigma', 'noise_dropout', 'data_seed',
    )

    def __post_init__(self) -> None:
        try:
            EncoderVariant(self.variant)
        except ValueError:
            raise ManifestError(f"unknown variant: {self.variant!r}") from None
        if self.schedule not in ('cosine', 'linear'):
            raise ManifestError(f"unknown schedule: {self.schedule!r}")
        positive = (
            'target_points', 'embedding_dim', 'h_pred', 'h_obs', 'h_act', 't_infer',
            'epochs', 'batch_size', 'n_demos', 'rounds_per_demo', 'render_resolution',
            'eval_episodes', 'eval_steps', 'eval_rounds', 'image_grid', 'time_dim',
            'bench_points', 'bench_repetitions',
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ManifestError(f"{name} must be positive")
        if self.h_act > self.h_pred:
            raise ManifestError('h_act cannot exceed h_pred')
        if self.t_infer > self.t_train:
            raise ManifestError('t_infer cannot exceed t_train')
        if not self.widths or not self.denoiser_hidden:
            raise ManifestError('widths and denoiser_hidden must not be empty')
        if self.activation not in ACTIVATIONS:
            raise ManifestError(f"unknown activation: {self.activation!r}")
        image = self.encoder_variant is EncoderVariant.IMAGE_BASELINE
        if image and self.encoder_config().image_feature_size < 1:
            raise ManifestError(f"image_grid {self.image_grid} is too small for the image encoder")

    # Text format ##############################################################

    @classmethod
    def parse(cls, text: str) -> RunManifest:
        values, grid = _parse_lines(text)
        if grid:
            raise ManifestError(f"grid keys in a run manifest: {sorted(grid)}")
        return cls.from_mapping(values)

    @classmethod
    def load(cls, path: Path) -> RunManifest:
        return cls.parse(_read_text(path))

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> RunManifest:
        types = _field_types(cls)
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ManifestError(f"unknown keys: {', '.join(unknown)}")
        kwargs = {key: _convert(key, raw, types[key]) for key, raw in values.items()}
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            if isinstance(e, ManifestError):
                raise
            raise ManifestError(str(e)) from None

    def to_text(self) -> str:
        """
        Canonical form: every key, sorted, one per line.
        """
        lines = []
        for key, value in sorted(asdict(self).items()):
            lines.append(f"{key} = {_format(value)}")
        return '\n'.join(lines) + '\n'

    def content_hash(self) -> str:
        return content_hash(self.to_text())

    def data_hash(self) -> str:
        """
        Hash of the keys that shape the demonstration data only.
        """
        text = ''.join(f"{key} = {_format(getattr(self, key))}\n" for key in self.DATA_KEYS)
        return content_hash(text)

    # Derived configuration ####################################################

    @property
    def encoder_variant(self) -> EncoderVariant:
        return EncoderVariant(self.variant)

    def encoder_config(self, proprio_dim: int = 4) -> EncoderConfig:
        return EncoderConfig(
            variant=self.encoder_variant,
            widths=self.widths,
            embedding_dim=self.embedding_dim,
            activation=self.activation,
            n_points=self.target_points,
            proprio_dim=proprio_dim,
            image_grid=self.image_grid,
        )

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(hidden=self.denoiser_hidden, time_dim=self.time_dim)

    def observation_config(self) -> ObservationConfig:
        return ObservationConfig(
            sampling=SamplingConfig(self.target_points, self.voxel_size, 0),
            grid=self.image_grid,
        )

    def optimizer(self) -> AdamWConfig:
        return AdamWConfig(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def jitter(self, seed: int = 0) -> JitterConfig:
        return JitterConfig(self.jitter_theta, self.jitter_sigma, seed)

    def scene(self, seed: int, rounds: int = 1) -> SceneConfig:
        noise = SensorNoise(
            self.noise_sigma, self.noise_dropout, self.noise_sigma > 0 or self.noise_dropout > 0)
        return SceneConfig(
            resolution=self.render_resolution, noise=noise, rounds=rounds, seed=seed)


@dataclass(frozen=True)
class GridManifest:
    """
    Base manifest plus the axes of an ablation grid.
    """
    base: RunManifest
    variants: tuple[str, ...]
    target_points: tuple[int, ...]
    h_preds: tuple[int, ...]
    data_seeds: tuple[int, ...]

    GRID_KEYS = ('grid.variant', 'grid.target_points', 'grid.h_pred', 'grid.data_seeds')

    @classmethod
    def parse(cls, text: str) -> GridManifest:
        values, grid = _parse_lines(text)
        unknown = sorted(set(grid) - set(cls.GRID_KEYS))
        if unknown:
            raise ManifestError(f"unknown grid keys: {', '.join(unknown)}")
        base = RunManifest.from_mapping(values)

        def axis(key: str, default: Any, convert: type) -> tuple[Any, ...]:
            if key not in grid:
                return (default,)
            try:
                items = tuple(convert(item.strip()) for item in grid[key].split(','))
            except ValueError:
                raise ManifestError(f"{key}: bad list {grid[key]!r}") from None
            if not items:
                raise ManifestError(f"{key}: empty list")
            return items

        manifest = cls(
            base,
            axis('grid.variant', base.variant, str),
            axis('grid.target_points', base.target_points, int),
            axis('grid.h_pred', base.h_pred, int),
            axis('grid.data_seeds', base.data_seed, int),
        )
        list(manifest.cells())                      # validates every combination
        return manifest

    @classmethod
    def load(cls, path: Path) -> GridManifest:
        return cls.parse(_read_text(path))

    def to_text(self) -> str:
        axes = (
            ('grid.data_seeds', self.data_seeds),
            ('grid.h_pred', self.h_preds),
            ('grid.target_points', self.target_points),
            ('grid.variant', self.variants),
        )
        lines = [f"{key} = {_format(values)}" for key, values in axes]
        return self.base.to_text() + '\n'.join(lines) + '\n'

    def content_hash(self) -> str:
        return content_hash(self.to_text())

    def cells(self) -> Iterator[RunManifest]:
        """
        One manifest per grid cell and data seed; seeds vary slowest.
        """
        for seed in self.data_seeds:
            for variant, points, h_pred in itertools.product(
                    self.variants, self.target_points, self.h_preds):
                h_act = min(self.base.h_act, h_pred)
                try:
                    yield replace(
                        self.base,
                        variant=variant,
                        target_points=points,
                        h_pred=h_pred,
                        h_act=h_act,
                        data_seed=seed,
                    )
                except ValueError as e:
                    if isinstance(e, ManifestError):
                        raise
                    raise ManifestError(str(e)) from None


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding='utf-8')
    except UnicodeDecodeError as e:
        message = f"{path.name}: not UTF-8 text (bad byte at offset {e.start})"
        raise ManifestError(message) from None


def _parse_lines(text: str) -> tuple[dict[str, str], dict[str, str]]:
    values: dict[str, str] = {}
    grid: dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        try:
            key, value = (part.strip() for part in line.split('=', 1))
        except ValueError:
            raise ManifestError(f"line {number}: expected key = value") from None
        target = grid if key.startswith('grid.') else values
        if key in target:
            raise ManifestError(f"line {number}: duplicate key {key!r}")
        target[key] = value
    return values, grid


def _field_types(cls: type) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {field.name: hints[field.name] for field in fields(cls)}


def _convert(key: str, raw: str, kind: Any) -> Any:
    try:
        if kind is bool:
            if raw.lower() not in ('true', 'false'):
                raise ValueError(raw)
            return raw.lower() == 'true'
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if typing.get_origin(kind) is tuple:
            return tuple(int(item.strip()) for item in raw.split(',') if item.strip())
    except ValueError:
        raise ManifestError(f"{key}: cannot parse {raw!r}") from None
    raise ManifestError(f"{key}: unsupported type {kind!r}")


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ', '.join(str(item) for item in value)
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)
