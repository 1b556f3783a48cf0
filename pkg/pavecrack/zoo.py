"""
Registry of the six ImageNet-pretrained backbones plus the binary crack head.

Backbones are built through a ``BackboneProvider`` so the training and
inference code never depends on a concrete architecture; the default
provider wraps ``keras.applications`` and loads the pretrained archives
recorded in ``weights.lock`` from the local cache.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import tensorflow as tf
from django.conf import settings
from tensorflow import keras

from .exceptions import DomainError, IntegrityError, PersistenceError, ProvenanceError
from .models import PatchSample

logger = logging.getLogger(__name__)

BACKBONE_NAMES = ("EfficientNetB7", "InceptionV3", "Xception", "MobileNetV2", "ResNet", "VGG16")
DEFAULT_UNFREEZE_FRACTION = 0.25
UNPINNED = "unpinned"

# Normalization modes understood by keras.applications.imagenet_utils, plus
# "none" for backbones that rescale inside the network (EfficientNet).
PREPROCESSING_MODES = ("caffe", "tf", "torch", "none")


@dataclass(frozen=True)
class BackboneSpec:
    """Descriptor of a pretrained backbone.

    ``layer_count`` is the number of freezable units; it is filled in by
    ``instantiate`` once the provider has built the network.
    """

    name: str
    native_input_side: int
    unfreeze_fraction: float = DEFAULT_UNFREEZE_FRACTION
    pretrained_source: str = ""
    preprocessing: str = "caffe"
    layer_count: int | None = None

    def __post_init__(self) -> None:
        if self.name not in BACKBONE_NAMES:
            raise DomainError(f"Unknown backbone {self.name!r}; expected one of {', '.join(BACKBONE_NAMES)}.")
        if not 0.0 <= self.unfreeze_fraction <= 1.0:
            raise DomainError(f"unfreeze_fraction must lie in [0, 1], got {self.unfreeze_fraction}.")
        if self.preprocessing not in PREPROCESSING_MODES:
            raise DomainError(f"Unknown preprocessing mode {self.preprocessing!r}.")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.native_input_side, self.native_input_side, 3


# Registry order is stable; "ResNet" is ResNet-50.
_REGISTRY = (
    BackboneSpec("EfficientNetB7", 600, preprocessing="none"),
    BackboneSpec("InceptionV3", 299, preprocessing="tf"),
    BackboneSpec("Xception", 299, preprocessing="tf"),
    BackboneSpec("MobileNetV2", 224, preprocessing="tf"),
    BackboneSpec("ResNet", 224, preprocessing="caffe"),
    BackboneSpec("VGG16", 224, preprocessing="caffe"),
)


# -----------------------------------------------------------------------------
# Weights lockfile
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class LockEntry:
    name: str
    uri: str
    digest: str


def read_weights_lock(path: Path | None = None) -> dict[str, LockEntry]:
    """Parse ``weights.lock`` (tab-separated ``name uri digest`` lines)."""
    path = Path(path or settings.PAVECRACK_WEIGHTS_LOCK)
    if not path.is_file():
        return {}
    entries = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, uri, digest = line.split("\t")
        entries[name] = LockEntry(name, uri, digest.strip())
    return entries


def list_backbones() -> list[BackboneSpec]:
    lock = read_weights_lock()
    return [
        replace(spec, pretrained_source=lock[spec.name].uri) if spec.name in lock else spec
        for spec in _REGISTRY
    ]


def get_backbone(name: str) -> BackboneSpec:
    for spec in list_backbones():
        if spec.name == name:
            return spec
    raise DomainError(f"Unknown backbone {name!r}; expected one of {', '.join(BACKBONE_NAMES)}.")


def sha256_of(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# -----------------------------------------------------------------------------
# Providers
# -----------------------------------------------------------------------------

class BackboneProvider:
    """Builds backbone networks and loads their pretrained parameters."""

    def build(self, spec: BackboneSpec) -> keras.Model:
        raise NotImplementedError

    def load_pretrained(self, backbone: keras.Model, spec: BackboneSpec) -> None:
        raise NotImplementedError

    def units(self, backbone: keras.Model) -> list[keras.layers.Layer]:
        """Weight-bearing layers (convolutions, dense) from input to output.

        Normalization layers are not units: they stay frozen and run in
        inference mode for the whole run.
        """
        units = []
        for layer in backbone.layers:
            if isinstance(layer, (keras.layers.BatchNormalization, keras.layers.LayerNormalization)):
                continue
            kernel = getattr(layer, "kernel", None)
            depthwise = getattr(layer, "depthwise_kernel", None)
            if kernel is not None or depthwise is not None:
                units.append(layer)
        return units


class KerasApplicationsProvider(BackboneProvider):
    _CONSTRUCTORS = {
        "EfficientNetB7": keras.applications.EfficientNetB7,
        "InceptionV3": keras.applications.InceptionV3,
        "Xception": keras.applications.Xception,
        "MobileNetV2": keras.applications.MobileNetV2,
        "ResNet": keras.applications.ResNet50,
        "VGG16": keras.applications.VGG16,
    }

    def __init__(self, cache_dir: Path | None = None, lock_path: Path | None = None) -> None:
        self.cache_dir = Path(cache_dir or settings.PAVECRACK_CACHE)
        self.lock = read_weights_lock(lock_path)

    def build(self, spec: BackboneSpec) -> keras.Model:
        return self._CONSTRUCTORS[spec.name](include_top=False, weights=None, input_shape=spec.input_shape)

    def archive_path(self, spec: BackboneSpec) -> Path:
        entry = self.lock.get(spec.name)
        if entry is None:
            raise ProvenanceError(f"No weights.lock entry for {spec.name}.")
        return self.cache_dir / spec.name / entry.uri.rsplit("/", 1)[-1]

    def resolve_archive(self, spec: BackboneSpec) -> Path:
        path = self.archive_path(spec)
        entry = self.lock[spec.name]
        if not path.is_file():
            if not settings.PAVECRACK_ALLOW_DOWNLOAD:
                raise ProvenanceError(
                    f"Pretrained archive for {spec.name} not found at {path}; place it there "
                    f"or set PAVECRACK_ALLOW_DOWNLOAD=true to fetch {entry.uri}."
                )
            logger.info("downloading archive backbone=%s uri=%s", spec.name, entry.uri)
            fetched = keras.utils.get_file(
                fname=path.name, origin=entry.uri, cache_dir=str(self.cache_dir), cache_subdir=spec.name
            )
            path = Path(fetched)
        actual = sha256_of(path)
        if entry.digest == UNPINNED:
            logger.warning("archive digest not pinned backbone=%s sha256=%s", spec.name, actual)
        elif actual != entry.digest:
            raise IntegrityError(
                f"Checksum mismatch for {path}: expected {entry.digest}, got {actual}."
            )
        return path

    def load_pretrained(self, backbone: keras.Model, spec: BackboneSpec) -> None:
        path = self.resolve_archive(spec)
        try:
            backbone.load_weights(str(path))
        except Exception as exc:
            raise ProvenanceError(f"Corrupt pretrained archive {path}: {exc}") from exc
        logger.info("pretrained weights loaded backbone=%s path=%s", spec.name, path)


def default_provider() -> BackboneProvider:
    return KerasApplicationsProvider()


# -----------------------------------------------------------------------------
# Classifier
# -----------------------------------------------------------------------------

class ClassifierModel:
    """A backbone with a global-average-pooling + single logistic unit head."""

    def __init__(
        self,
        spec: BackboneSpec,
        backbone: keras.Model,
        units: list[keras.layers.Layer],
        *,
        head_seed: int = 0,
    ) -> None:
        self.spec = spec
        self.backbone = backbone
        self.units = units
        self.head_seed = head_seed
        self.unfrozen_units = 0
        # Set by the trainer; kept while the learning rate and trainable set are unchanged.
        self.optimizer: keras.optimizers.Optimizer | None = None
        self.optimizer_key: tuple | None = None
        self.head = keras.layers.Dense(
            1,
            activation="sigmoid",
            kernel_initializer=keras.initializers.GlorotUniform(seed=head_seed),
            bias_initializer="zeros",
            name="crack_head",
        )
        inputs = keras.Input(shape=spec.input_shape, name="patch")
        # training=False keeps normalization statistics frozen in both phases.
        features = backbone(inputs, training=False)
        pooled = keras.layers.GlobalAveragePooling2D(name="pool")(features)
        self.network = keras.Model(inputs, self.head(pooled), name=f"{spec.name}_crack")
        self.freeze_backbone()

    @property
    def layer_count(self) -> int:
        return len(self.units)

    @property
    def trainable_parameter_count(self) -> int:
        return int(sum(np.prod(weight.shape) for weight in self.network.trainable_weights))

    @property
    def head_parameter_count(self) -> int:
        return int(sum(np.prod(weight.shape) for weight in self.head.weights))

    def freeze_backbone(self) -> None:
        self.backbone.trainable = False
        self.unfrozen_units = 0

    def set_unfrozen_units(self, count: int) -> None:
        self.backbone.trainable = True
        top = set(id(layer) for layer in self.units[len(self.units) - count:]) if count else set()
        for layer in self.backbone.layers:
            layer.trainable = id(layer) in top
        self.unfrozen_units = count
        if count == 0:
            self.backbone.trainable = False

    def preprocess_pixels(self, pixels: np.ndarray) -> np.ndarray:
        return preprocess_batch(pixels, self.spec)

    def predict_pixels(self, pixels: np.ndarray) -> np.ndarray:
        """Crack probabilities for a ``(n, side, side, 3)`` uint8 batch of patches."""
        if len(pixels) == 0:
            return np.zeros(0, dtype=np.float32)
        inputs = self.preprocess_pixels(pixels)
        return np.asarray(self.network(inputs, training=False), dtype=np.float32).reshape(-1)


def instantiate(
    spec: BackboneSpec,
    *,
    head_seed: int = 0,
    provider: BackboneProvider | None = None,
    load_pretrained: bool = True,
) -> ClassifierModel:
    """Build ``spec`` with pretrained backbone weights and a fresh, seeded head.

    The returned model trains only its head until ``unfreeze_top`` is called.
    """
    provider = provider or default_provider()
    backbone = provider.build(spec)
    if load_pretrained:
        provider.load_pretrained(backbone, spec)
    units = provider.units(backbone)
    resolved = replace(spec, layer_count=len(units))
    model = ClassifierModel(resolved, backbone, units, head_seed=head_seed)
    logger.info(
        "model instantiated backbone=%s units=%d trainable=%d",
        spec.name, len(units), model.trainable_parameter_count,
    )
    return model


def unfreeze_top(model: ClassifierModel, fraction: float) -> ClassifierModel:
    """Make the head plus the topmost ``ceil(fraction * layer_count)`` units trainable."""
    if not 0.0 <= fraction <= 1.0:
        raise DomainError(f"fraction must lie in [0, 1], got {fraction}.")
    count = math.ceil(fraction * model.layer_count)
    model.set_unfrozen_units(count)
    logger.info(
        "backbone unfrozen backbone=%s units=%d/%d trainable=%d",
        model.spec.name, count, model.layer_count, model.trainable_parameter_count,
    )
    return model


def preprocess_batch(pixels: np.ndarray, spec: BackboneSpec) -> np.ndarray:
    """Bilinear resize to the native side, then the backbone's ImageNet normalization."""
    batch = tf.convert_to_tensor(np.asarray(pixels), dtype=tf.float32)
    side = spec.native_input_side
    if batch.shape[1] != side or batch.shape[2] != side:
        batch = tf.image.resize(batch, (side, side), method="bilinear")
    array = np.array(batch, dtype=np.float32)
    if spec.preprocessing == "none":
        return array
    return keras.applications.imagenet_utils.preprocess_input(array, mode=spec.preprocessing)


def preprocess(patch: PatchSample, spec: BackboneSpec) -> np.ndarray:
    return preprocess_batch(patch.pixels[np.newaxis], spec)[0]


# -----------------------------------------------------------------------------
# Checkpoints
# -----------------------------------------------------------------------------

WEIGHTS_SUFFIX = ".weights.h5"


def save_checkpoint(model: ClassifierModel, stem: Path) -> Path:
    """Write ``{stem}.weights.h5`` and a ``{stem}.json`` sidecar; return the weights path."""
    weights_path = stem.with_name(stem.name + WEIGHTS_SUFFIX)
    meta = {
        "spec": asdict(model.spec),
        "head_seed": model.head_seed,
        "unfrozen_units": model.unfrozen_units,
    }
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        model.network.save_weights(str(weights_path))
        stem.with_name(stem.name + ".json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    except (OSError, ValueError) as exc:
        raise PersistenceError(f"Cannot write checkpoint {weights_path}: {exc}") from exc
    logger.info("checkpoint saved path=%s", weights_path)
    return weights_path


def load_checkpoint(path: Path, *, provider: BackboneProvider | None = None) -> ClassifierModel:
    """Rebuild a model from a ``.weights.h5`` checkpoint and its JSON sidecar."""
    path = Path(path)
    name = path.name[: -len(WEIGHTS_SUFFIX)] if path.name.endswith(WEIGHTS_SUFFIX) else path.stem
    meta_path = path.with_name(name + ".json")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise PersistenceError(f"Cannot read checkpoint metadata {meta_path}: {exc}") from exc
    spec_data = dict(meta["spec"])
    spec_data["layer_count"] = None
    spec = BackboneSpec(**spec_data)
    model = instantiate(spec, head_seed=meta.get("head_seed", 0), provider=provider, load_pretrained=False)
    model.set_unfrozen_units(int(meta.get("unfrozen_units", 0)))
    try:
        model.network.load_weights(str(path))
    except (OSError, ValueError) as exc:
        raise PersistenceError(f"Cannot load checkpoint {path}: {exc}") from exc
    return model
