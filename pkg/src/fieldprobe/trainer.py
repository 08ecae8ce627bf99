"""Training driver for field-probing classifiers.

Covers the whole loop around the layers: manifest-backed datasets, an
unaugmented field cache, network assembly for the two stock
architectures, the SGD loop with optional on-the-fly perturbation,
checkpointing with bitwise-reproducible resume, evaluation, feature
export, and fine-tuning from a donor checkpoint.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import hashlib
import json
import os
import struct
import threading
import time

import numpy as np

from .errors import FormatError, ParseError, TrainingDiverged
from .field import (
    Field3D,
    ROLE_DISTANCE,
    ROLE_GENERIC,
    distance_field,
    field_from_occupancy,
    load_field,
    save_field,
)
from .ingest import (
    DEFAULT_MARGIN,
    DEFAULT_SAMPLES_PER_AREA,
    apply_perturbation,
    load_manifest,
    load_shape,
    normalize,
    parse_perturbation_modes,
    sample_perturbation,
    voxelize,
)
from .nn import (
    BatchNorm,
    Dropout,
    FullyConnected,
    Network,
    ReLU,
    Sgd,
    SgdConfig,
    Tensor,
    block_error,
    grad_check,
    softmax_cross_entropy,
)
from .probing import (
    FilterBank,
    InitConfig,
    dotproduct_backward,
    dotproduct_forward,
    gaussian_backward,
    gaussian_forward,
    init_filter_bank,
    sensor_backward,
    sensor_forward,
)

# Fixed seed for evaluation-time perturbations: eval views must not depend
# on how far training has advanced the master stream.
EVAL_SEED = 20260818

ARCHITECTURES = ("1-FC", "4-FCs")
CHANNEL_SETS = {"distance": 1, "distance+normals": 4}
HIDDEN_WIDTH = 1024

CHECKPOINT_MAGIC = b"FPCK"
CHECKPOINT_VERSION = 1

METRICS_HEADER = "iteration,loss,train_acc,eval_acc,wall_ms"


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """One flat bundle of every knob a run needs.

    `to_text`/`from_text` round-trip the exact values through sorted
    ``key=value`` lines; that canonical text is what checkpoints echo and
    what resume compares against. `classes=0` means "infer from the train
    manifest"; `sigma=0` means one tenth of the normalized object size.
    """

    architecture: str = "1-FC"
    resolution: int = 32
    channels: str = "distance"
    grid_divisions: int = 4
    filters_per_cell: int = 1
    points_per_filter: int = 8
    length_low: float = 0.2
    length_high: float = 0.8
    init_seed: int = 0
    sigma: float = 0.0
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32
    max_iterations: int = 2000
    seed: int = 0
    dropout: float = 0.5
    augmentation: str = ""
    samples_per_area: float = 8.0
    classes: int = 0
    freeze_probing: bool = False
    train_manifest: str = ""
    test_manifest: str = ""
    cache_dir: str = ""
    out_dir: str = "run"
    checkpoint_every: int = 500
    eval_every: int = 500
    pipeline_workers: int = 1

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError("architecture must be one of %s, got %r"
                             % ("/".join(ARCHITECTURES), self.architecture))
        if self.channels not in CHANNEL_SETS:
            raise ValueError("channels must be one of %s, got %r"
                             % ("/".join(sorted(CHANNEL_SETS)), self.channels))
        if self.resolution < 8:
            raise ValueError("resolution must be >= 8")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0 (0 selects the default)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.samples_per_area <= 0:
            raise ValueError("samples_per_area must be positive")
        if self.classes < 0 or self.classes == 1:
            raise ValueError("classes must be 0 (infer) or >= 2")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ValueError("checkpoint_every/eval_every must be >= 0")
        if self.pipeline_workers < 1:
            raise ValueError("pipeline_workers must be >= 1")
        # these two validate their own slices of the config eagerly
        self.init_config
        self.sgd_config
        if self.augmentation:
            parse_perturbation_modes(self.augmentation)

    @property
    def channel_count(self):
        return CHANNEL_SETS[self.channels]

    @property
    def effective_sigma(self):
        if self.sigma > 0:
            return self.sigma
        return 0.1 * (self.resolution - 2 * DEFAULT_MARGIN)

    @property
    def init_config(self):
        return InitConfig(
            grid_divisions=self.grid_divisions,
            filters_per_cell=self.filters_per_cell,
            points_per_filter=self.points_per_filter,
            length_low=self.length_low,
            length_high=self.length_high,
            seed=self.init_seed,
        )

    @property
    def sgd_config(self):
        return SgdConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            max_iterations=self.max_iterations,
            seed=self.seed,
        )

    def to_text(self):
        lines = []
        for field in sorted(dataclasses.fields(self), key=lambda f: f.name):
            value = getattr(self, field.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append("%s=%s" % (field.name, text))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        coerce = {"int": int, "float": float, "str": str, "bool": _parse_bool}
        types = {}
        for field in dataclasses.fields(cls):
            name = field.type if isinstance(field.type, str) else field.type.__name__
            types[field.name] = coerce[name]
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected key=value", line=lineno)
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ParseError("unknown key %r" % key, line=lineno)
            if key in kwargs:
                raise ParseError("duplicate key %r" % key, line=lineno)
            try:
                kwargs[key] = types[key](value)
            except ValueError:
                raise ParseError("bad value for %s: %r" % (key, value),
                                 line=lineno) from None
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        """Parse a config file; relative paths are taken relative to it."""
        with open(path, "r", encoding="utf-8") as handle:
            cfg = cls.from_text(handle.read())
        base = os.path.dirname(os.path.abspath(path))
        resolved = {}
        for key in ("train_manifest", "test_manifest", "cache_dir", "out_dir"):
            value = getattr(cfg, key)
            if value and not os.path.isabs(value):
                resolved[key] = os.path.normpath(os.path.join(base, value))
        if resolved:
            cfg = dataclasses.replace(cfg, **resolved)
        for key in ("train_manifest", "test_manifest"):
            value = getattr(cfg, key)
            if value and not os.path.exists(value):
                raise FileNotFoundError("%s does not exist: %s" % (key, value))
        return cfg


def _parse_bool(text):
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError("expected true or false, got %r" % text)


def full_scale_config(**overrides):
    """The full-size recipe: 64^3 fields, 1024 filters, four channels."""
    base = dict(resolution=64, filters_per_cell=16, channels="distance+normals",
                batch_size=1024, max_iterations=80000,
                checkpoint_every=1000, eval_every=1000)
    base.update(overrides)
    return TrainConfig(**base)


class ShapeDataset:
    """Manifest-backed shapes, normalized lazily and memoized."""

    def __init__(self, manifest_path, resolution, class_count=0,
                 margin=DEFAULT_MARGIN):
        entries = load_manifest(manifest_path)
        self.base = os.path.dirname(os.path.abspath(manifest_path))
        self.ids = [path for path, _ in entries]
        self.labels = np.array([label for _, label in entries], dtype=np.int64)
        top = int(self.labels.max())
        if class_count == 0:
            class_count = top + 1
        elif top >= class_count:
            raise ValueError("manifest label %d outside the %d trained classes"
                             % (top, class_count))
        self.class_count = int(class_count)
        self.resolution = int(resolution)
        self.margin = margin
        self._shapes = {}

    def __len__(self):
        return len(self.ids)

    def id(self, index):
        return self.ids[index]

    def label(self, index):
        return int(self.labels[index])

    def shape(self, index):
        """The normalized sample; raw file I/O happens on first access."""
        cached = self._shapes.get(index)
        if cached is None:
            raw = load_shape(os.path.join(self.base, self.ids[index]),
                             self.label(index))
            cached = normalize(raw, self.resolution, self.margin)
            self._shapes[index] = cached
        return cached


def build_field(occ, channels):
    """Distance-only or distance-plus-normals field stack, float32."""
    if channels == "distance":
        values = distance_field(occ).astype(np.float32)[None]
        return Field3D(values, np.array([ROLE_DISTANCE], dtype=np.uint8))
    return field_from_occupancy(occ)


def sample_seed(sample_id):
    """Stable voxelization seed for a manifest entry, independent of any
    generator state so cached fields never depend on training order."""
    digest = hashlib.sha1(("voxelize:" + sample_id).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class FieldCache:
    """Unaugmented fields memoized in memory and, when given a directory,
    on disk. Perturbed views are never cached; they are cheap relative to
    a training step and must track the perturbation draw exactly."""

    def __init__(self, cache_dir, resolution, channels,
                 samples_per_area=DEFAULT_SAMPLES_PER_AREA):
        if channels not in CHANNEL_SETS:
            raise ValueError("unknown channel set %r" % channels)
        self.dir = cache_dir or None
        self.resolution = int(resolution)
        self.channels = channels
        self.samples_per_area = float(samples_per_area)
        self._memory = {}
        self._lock = threading.Lock()
        if self.dir:
            os.makedirs(self.dir, exist_ok=True)

    def _path(self, sample_id):
        tag = "%s|%d|%s|%g" % (sample_id, self.resolution, self.channels,
                               self.samples_per_area)
        name = hashlib.sha1(tag.encode("utf-8")).hexdigest()[:24]
        return os.path.join(self.dir, name + ".fpf")

    def field_for(self, dataset, index):
        # serialized so parallel pipeline workers cannot race a disk write
        with self._lock:
            sample_id = dataset.id(index)
            field = self._memory.get(sample_id)
            if field is not None:
                return field
            path = self._path(sample_id) if self.dir else None
            if path and os.path.exists(path):
                field = load_field(path)
            else:
                occ = voxelize(dataset.shape(index), self.resolution,
                               self.samples_per_area,
                               seed=sample_seed(sample_id))
                field = build_field(occ, self.channels)
                if path:
                    save_field(field, path)
            self._memory[sample_id] = field
            return field


class ProbingBlock:
    """Batch adapter around the probing layers: a list of per-sample fields
    in, a (batch, filter_count) activation matrix out. Owns the filter bank
    and exposes its arrays as optimizer tensors sharing the same storage.
    """

    def __init__(self, bank: FilterBank, sigma, name="probing", frozen=False):
        if sigma <= 0:
            raise ValueError("sigma must be positive, got %r" % sigma)
        self.bank = bank
        self.sigma = float(sigma)
        self.name = name
        self.frozen = bool(frozen)
        self.locations = Tensor(bank.locations, grad=bank.location_gradients,
                                name=name + ".locations", decay=False)
        self.weights = Tensor(bank.weights, grad=bank.weight_gradients,
                              name=name + ".weights", decay=True)
        self._caches = None

    def params(self):
        return [] if self.frozen else [self.locations, self.weights]

    def state(self):
        """Frozen banks still belong in checkpoints; trainable ones are
        already covered through params()."""
        if not self.frozen:
            return {}
        return {self.locations.name: self.locations.values,
                self.weights.name: self.weights.values}

    def forward(self, fields, train=False, rng=None):
        track = train and not self.frozen
        out = np.empty((len(fields), self.bank.filter_count), dtype=np.float64)
        caches = [] if track else None
        for row, field in enumerate(fields):
            sensor = sensor_forward(self.bank, field, with_gradients=track)
            mask = field.roles == ROLE_DISTANCE
            squashed = sensor.values.copy()
            squashed[:, :, mask] = gaussian_forward(sensor.values[:, :, mask],
                                                    self.sigma)
            out[row] = dotproduct_forward(self.bank, squashed)
            if track:
                caches.append((sensor, mask, squashed))
        self._caches = caches
        return out

    def backward(self, upstream):
        if self.frozen:
            return None
        if self._caches is None:
            raise RuntimeError("probing backward without a training forward")
        caches, self._caches = self._caches, None
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (len(caches), self.bank.filter_count):
            raise ValueError("upstream shape %s does not match the forward batch"
                             % (upstream.shape,))
        for (sensor, mask, squashed), row in zip(caches, upstream):
            grads = dotproduct_backward(self.bank, squashed, row)
            grads[:, :, mask] = gaussian_backward(sensor.values[:, :, mask],
                                                  grads[:, :, mask], self.sigma)
            sensor_backward(self.bank, sensor, grads)
        return None


def build_model(cfg: TrainConfig):
    """Assemble (network, bank, probing block) for a resolved config."""
    if cfg.classes < 2:
        raise ValueError("classes must be >= 2 to build a model "
                         "(train once or set classes explicitly)")
    bank = init_filter_bank(cfg.init_config, cfg.resolution,
                            channel_count=cfg.channel_count, dtype=np.float32)
    probing = ProbingBlock(bank, cfg.effective_sigma, frozen=cfg.freeze_probing)
    width = bank.filter_count
    rng = np.random.default_rng(cfg.init_seed + 1)
    layers = [probing, BatchNorm(width, name="bn_in"), ReLU(name="relu_in")]
    if cfg.architecture == "4-FCs":
        dim = width
        for k in (1, 2, 3):
            layers += [
                FullyConnected(dim, HIDDEN_WIDTH, rng, name="fc%d" % k),
                BatchNorm(HIDDEN_WIDTH, name="bn%d" % k),
                ReLU(name="relu%d" % k),
                Dropout(cfg.dropout, name="drop%d" % k),
            ]
            dim = HIDDEN_WIDTH
        layers.append(FullyConnected(dim, cfg.classes, rng, name="fc_out"))
    else:
        layers.append(FullyConnected(width, cfg.classes, rng, name="fc_out"))
    return Network(layers), bank, probing


@dataclasses.dataclass
class Checkpoint:
    iteration: int
    blocks: dict
    config_text: str
    rng_state: dict


def save_checkpoint(path, iteration, blocks, config_text, rng_state):
    """Serialize parameter blocks plus run metadata.

    Layout (little-endian, no padding): magic "FPCK", u32 version,
    u64 iteration, u32 block count, then per block u32 name length,
    UTF-8 name, u32 rank, u32 dims, float32 values; finally a u32-length
    JSON trailer holding the canonical config text and the master
    generator state. Blocks must already be float32 so that
    load(save(x)) is bitwise x.
    """
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<IQI", CHECKPOINT_VERSION, int(iteration),
                         len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise ValueError("block %r must be float32, got %s" % (name, arr.dtype))
        if arr.ndim < 1 or arr.ndim > 3:
            raise ValueError("block %r has rank %d; 1..3 supported" % (name, arr.ndim))
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack("<%dI" % arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    trailer = json.dumps({"config": config_text, "rng": rng_state},
                         sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(trailer)))
    parts.append(trailer)
    tmp = path + ".tmp"
    with open(tmp, "wb") as handle:
        handle.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as handle:
        blob = handle.read()
    offset = 0

    def take(count, what):
        nonlocal offset
        if offset + count > len(blob):
            raise FormatError("truncated checkpoint: %s" % what)
        piece = blob[offset:offset + count]
        offset += count
        return piece

    def u32(what):
        return struct.unpack("<I", take(4, what))[0]

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version = u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError("unsupported checkpoint version %d" % version)
    iteration = struct.unpack("<Q", take(8, "iteration"))[0]
    count = u32("block count")
    if count > 65536:
        raise FormatError("implausible block count %d" % count)
    blocks = {}
    for _ in range(count):
        name_len = u32("name length")
        if name_len == 0 or name_len > 4096:
            raise FormatError("implausible block name length %d" % name_len)
        try:
            name = take(name_len, "block name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("block name is not UTF-8") from None
        rank = u32("rank of %s" % name)
        if rank < 1 or rank > 3:
            raise FormatError("block %r has unsupported rank %d" % (name, rank))
        dims = struct.unpack("<%dI" % rank, take(4 * rank, "dims of %s" % name))
        size = int(np.prod(dims, dtype=np.int64))
        if min(dims) == 0 or size > 2 ** 31:
            raise FormatError("block %r has implausible shape %s" % (name, dims))
        data = take(4 * size, "values of %s" % name)
        if name in blocks:
            raise FormatError("duplicate block %r" % name)
        blocks[name] = np.frombuffer(data, dtype="<f4").reshape(dims).copy()
    trailer = take(u32("trailer length"), "metadata trailer")
    if offset != len(blob):
        raise FormatError("%d trailing bytes after checkpoint payload"
                          % (len(blob) - offset))
    try:
        meta = json.loads(trailer.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("checkpoint metadata is not valid JSON") from None
    if not isinstance(meta, dict) or not isinstance(meta.get("config"), str) \
            or not isinstance(meta.get("rng"), dict):
        raise FormatError("checkpoint metadata missing config or rng state")
    return Checkpoint(iteration=int(iteration), blocks=blocks,
                      config_text=meta["config"], rng_state=meta["rng"])


def _model_blocks(net, opt=None):
    """Every array a checkpoint captures: parameters, auxiliary state, and
    (when an optimizer is attached) its velocity buffers."""
    blocks = dict(net.state_blocks())
    if opt is not None:
        for p, v in zip(opt.params, opt.velocities):
            blocks["velocity." + p.name] = v
    return blocks


def load_model_state(net, checkpoint, opt=None):
    """Copy checkpoint blocks into a freshly built model (and optimizer).

    Shapes must match exactly; without an optimizer the velocity blocks
    are ignored so a checkpoint can be opened for evaluation alone.
    """
    targets = _model_blocks(net, opt)
    for name, arr in checkpoint.blocks.items():
        if opt is None and name.startswith("velocity."):
            continue
        target = targets.get(name)
        if target is None:
            raise ValueError("checkpoint block %r has no home in this model" % name)
        if target.shape != arr.shape:
            raise ValueError("checkpoint block %r has shape %s, model expects %s"
                             % (name, arr.shape, target.shape))
        target[...] = arr
    missing = set(targets) - set(checkpoint.blocks)
    if missing:
        raise ValueError("checkpoint is missing blocks: %s" % sorted(missing))


def probing_displacement(cfg: TrainConfig, bank: FilterBank):
    """Mean point travel (voxels) from the config's initialization."""
    reference = init_filter_bank(cfg.init_config, cfg.resolution,
                                 channel_count=cfg.channel_count,
                                 dtype=np.float32)
    delta = bank.locations.astype(np.float64) - reference.locations
    return float(np.linalg.norm(delta, axis=2).mean())


@dataclasses.dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # (classes, classes), rows true, columns predicted


def evaluate_network(net, dataset, cache, cfg, perturb=(), chunk=64):
    """Eval-mode accuracy over one deterministic view per sample.

    With `perturb` modes the view is drawn from a generator keyed by
    (EVAL_SEED, sample id), so repeated evaluations see identical inputs
    no matter what the training loop has consumed.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    predictions = np.empty(len(dataset), dtype=np.int64)
    for start in range(0, len(dataset), chunk):
        stop = min(start + chunk, len(dataset))
        fields = []
        for index in range(start, stop):
            if perturb:
                rng = np.random.default_rng(
                    (EVAL_SEED, sample_seed(dataset.id(index))))
                view = apply_perturbation(dataset.shape(index),
                                          sample_perturbation(perturb, rng))
                occ = voxelize(view, cfg.resolution, cfg.samples_per_area,
                               seed=int(rng.integers(2 ** 63)))
                fields.append(build_field(occ, cfg.channels))
            else:
                fields.append(cache.field_for(dataset, index))
        logits = net.forward(fields, train=False)
        predictions[start:stop] = np.argmax(logits, axis=1)
    confusion = np.zeros((dataset.class_count, dataset.class_count),
                         dtype=np.int64)
    np.add.at(confusion, (dataset.labels, predictions), 1)
    accuracy = float((predictions == dataset.labels).mean())
    return EvalResult(accuracy=accuracy, confusion=confusion)


@dataclasses.dataclass
class TrainResult:
    config: TrainConfig
    checkpoint_path: str
    metrics_path: str
    test_accuracy: float
    confusion: np.ndarray
    displacement: float
    net: Network
    bank: FilterBank


def train(cfg: TrainConfig, resume=None, donor=None,
          trainable=("probing", "head")) -> TrainResult:
    """Run the SGD loop and return the final state.

    `resume` continues from a checkpoint written by an identical config
    (same canonical text, same trainable set) and reproduces the
    uninterrupted run bitwise. `donor` seeds the probing bank from
    another run's checkpoint before training starts; `trainable` names
    the parameter groups that move ("probing", "head"). Resuming a
    fine-tune requires the same `trainable` tuple again.
    """
    trainable = tuple(trainable)
    unknown = set(trainable) - {"probing", "head"}
    if unknown:
        raise ValueError("unknown trainable groups: %s" % sorted(unknown))
    if resume is not None and donor is not None:
        raise ValueError("resume and donor are mutually exclusive")
    if not cfg.train_manifest:
        raise ValueError("train_manifest is required")

    train_ds = ShapeDataset(cfg.train_manifest, cfg.resolution,
                            class_count=cfg.classes)
    cfg = dataclasses.replace(
        cfg, classes=train_ds.class_count,
        freeze_probing=cfg.freeze_probing or "probing" not in trainable)
    test_ds = None
    if cfg.test_manifest:
        test_ds = ShapeDataset(cfg.test_manifest, cfg.resolution,
                               class_count=cfg.classes)
    cache = FieldCache(cfg.cache_dir or None, cfg.resolution, cfg.channels,
                       cfg.samples_per_area)

    net, bank, probing = build_model(cfg)
    params = list(probing.params())
    if "head" in trainable:
        params += [p for layer in net.layers if layer is not probing
                   for p in layer.params()]
    if not params:
        raise ValueError("nothing to train: every parameter group is frozen")
    opt = Sgd(params, cfg.sgd_config)
    config_text = cfg.to_text()

    if donor is not None:
        donor_ck = load_checkpoint(donor)
        donor_cfg = TrainConfig.from_text(donor_ck.config_text)
        for key in ("resolution", "channels", "grid_divisions",
                    "filters_per_cell", "points_per_filter"):
            if getattr(donor_cfg, key) != getattr(cfg, key):
                raise ValueError(
                    "donor checkpoint %s=%r does not match config %r"
                    % (key, getattr(donor_cfg, key), getattr(cfg, key)))
        for tensor in (probing.locations, probing.weights):
            block = donor_ck.blocks.get(tensor.name)
            if block is None:
                raise ValueError("donor checkpoint lacks block %r" % tensor.name)
            tensor.values[...] = block

    master = np.random.default_rng(cfg.seed)
    start = 0
    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    fresh_metrics = True
    if resume is not None:
        ck = load_checkpoint(resume)
        if _model_config_text(ck.config_text) != \
                _model_config_text(config_text):
            raise ValueError("checkpoint config does not match; first diff: %s"
                             % _first_diff(ck.config_text, config_text))
        load_model_state(net, ck, opt)
        generator = np.random.PCG64()
        generator.state = ck.rng_state
        master = np.random.Generator(generator)
        start = ck.iteration
        fresh_metrics = not os.path.exists(metrics_path)

    modes = parse_perturbation_modes(cfg.augmentation) if cfg.augmentation else ()
    sample_count = len(train_ds)

    def build_view(job):
        index, perturb, vox_seed = job
        if perturb is None:
            return cache.field_for(train_ds, index)
        view = apply_perturbation(train_ds.shape(index), perturb)
        occ = voxelize(view, cfg.resolution, cfg.samples_per_area,
                       seed=vox_seed)
        return build_field(occ, cfg.channels)

    # All randomness is drawn on the main thread in a fixed order, so the
    # worker count changes wall time only, never batch content.
    pool = None
    if cfg.pipeline_workers > 1:
        pool = concurrent.futures.ThreadPoolExecutor(
            max_workers=cfg.pipeline_workers)
    try:
        with open(metrics_path, "w" if fresh_metrics else "a",
                  encoding="utf-8") as metrics:
            if fresh_metrics:
                metrics.write(METRICS_HEADER + "\n")
            for it in range(start + 1, cfg.max_iterations + 1):
                t0 = time.perf_counter()
                picks = master.integers(0, sample_count, size=cfg.batch_size)
                dropout_rng = np.random.default_rng(
                    int(master.integers(2 ** 63)))
                labels = np.empty(cfg.batch_size, dtype=np.int64)
                jobs = []
                for slot, index in enumerate(picks):
                    index = int(index)
                    labels[slot] = train_ds.label(index)
                    if modes:
                        jobs.append((index,
                                     sample_perturbation(modes, master),
                                     int(master.integers(2 ** 63))))
                    else:
                        jobs.append((index, None, 0))
                if pool is not None:
                    fields = list(pool.map(build_view, jobs))
                else:
                    fields = [build_view(job) for job in jobs]
                opt.zero_grads()
                logits = net.forward(fields, train=True, rng=dropout_rng)
                loss, dlogits = softmax_cross_entropy(logits, labels)
                if not np.isfinite(loss):
                    path = os.path.join(cfg.out_dir, "diverged.fpck")
                    save_checkpoint(path, it, _model_blocks(net, opt),
                                    config_text, master.bit_generator.state)
                    raise TrainingDiverged(
                        "loss became non-finite at iteration %d" % it,
                        checkpoint_path=path)
                train_acc = float(
                    (np.argmax(logits, axis=1) == labels).mean())
                net.backward(dlogits)
                opt.step()
                bank.clamp_locations()
                eval_text = ""
                if test_ds is not None and cfg.eval_every \
                        and it % cfg.eval_every == 0:
                    eval_text = "%.6f" % evaluate_network(
                        net, test_ds, cache, cfg).accuracy
                wall_ms = (time.perf_counter() - t0) * 1000.0
                metrics.write("%d,%.9g,%.6f,%s,%.3f\n"
                              % (it, loss, train_acc, eval_text, wall_ms))
                if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                    save_checkpoint(
                        os.path.join(cfg.out_dir, "ckpt_%06d.fpck" % it),
                        it, _model_blocks(net, opt), config_text,
                        master.bit_generator.state)
    finally:
        if pool is not None:
            pool.shutdown()

    accuracy, confusion = float("nan"), None
    if test_ds is not None:
        result = evaluate_network(net, test_ds, cache, cfg)
        accuracy, confusion = result.accuracy, result.confusion
    final_path = os.path.join(cfg.out_dir, "final.fpck")
    save_checkpoint(final_path, cfg.max_iterations, _model_blocks(net, opt),
                    config_text, master.bit_generator.state)
    return TrainResult(config=cfg, checkpoint_path=final_path,
                       metrics_path=metrics_path, test_accuracy=accuracy,
                       confusion=confusion,
                       displacement=probing_displacement(cfg, bank),
                       net=net, bank=bank)


# keys that steer execution, not the model; resume may change them freely
_EXECUTION_KEYS = ("pipeline_workers",)


def _model_config_text(text):
    return "\n".join(line for line in text.splitlines()
                     if line.split("=", 1)[0] not in _EXECUTION_KEYS)


def _first_diff(a, b):
    left = a.splitlines()
    right = b.splitlines()
    for i in range(max(len(left), len(right))):
        la = left[i] if i < len(left) else "<missing>"
        lb = right[i] if i < len(right) else "<missing>"
        if la != lb:
            return "%r vs %r" % (la, lb)
    return "<none>"


def fine_tune(donor_checkpoint, cfg: TrainConfig,
              trainable=("head",)) -> TrainResult:
    """Continue from a donor's probing bank on a new task.

    The classifier head is rebuilt for the new class count; `trainable`
    picks what moves (default: head only, probing frozen). An empty
    tuple is rejected because nothing could learn.
    """
    if not trainable:
        raise ValueError("nothing to train: empty trainable set")
    return train(cfg, donor=donor_checkpoint, trainable=trainable)


def _open_model(checkpoint_path):
    ck = load_checkpoint(checkpoint_path)
    cfg = TrainConfig.from_text(ck.config_text)
    net, bank, probing = build_model(cfg)
    load_model_state(net, ck)
    return ck, cfg, net


def evaluate_checkpoint(checkpoint_path, manifest_path, perturb="",
                        cache_dir=""):
    """Accuracy and confusion of a saved model over a manifest."""
    ck, cfg, net = _open_model(checkpoint_path)
    dataset = ShapeDataset(manifest_path, cfg.resolution,
                           class_count=cfg.classes)
    cache = FieldCache(cache_dir or None, cfg.resolution, cfg.channels,
                       cfg.samples_per_area)
    modes = parse_perturbation_modes(perturb) if perturb else ()
    return evaluate_network(net, dataset, cache, cfg, perturb=modes)


def extract_features(checkpoint_path, manifest_path, out_path, cache_dir=""):
    """Dump per-sample activations entering the final FC layer as CSV."""
    ck, cfg, net = _open_model(checkpoint_path)
    dataset = ShapeDataset(manifest_path, cfg.resolution,
                           class_count=cfg.classes)
    cache = FieldCache(cache_dir or None, cfg.resolution, cfg.channels,
                       cfg.samples_per_area)
    body = net.layers[:-1]
    rows = []
    width = None
    for start in range(0, len(dataset), 64):
        stop = min(start + 64, len(dataset))
        fields = [cache.field_for(dataset, i) for i in range(start, stop)]
        x = fields
        for layer in body:
            x = layer.forward(x, train=False)
        width = x.shape[1]
        for offset, index in enumerate(range(start, stop)):
            rows.append((dataset.id(index), dataset.label(index), x[offset]))
    with open(out_path, "w", encoding="utf-8") as handle:
        handle.write("id,label," +
                     ",".join("f%d" % i for i in range(width)) + "\n")
        for sample_id, label, feats in rows:
            handle.write("%s,%d,%s\n" % (sample_id, label,
                                         ",".join("%.9g" % v for v in feats)))
    return out_path


def _random_multilinear_field(rng, resolution, channels):
    """Random per-axis-linear channels: the one family where the sampler's
    precomputed gradients equal the true field gradient everywhere, making
    finite differences a faithful oracle for the probing layers."""
    grid = np.arange(resolution, dtype=np.float64)
    z, y, x = np.meshgrid(grid, grid, grid, indexing="ij")
    span = resolution - 1.0
    terms = [np.ones_like(x), x, y, z, x * y, x * z, y * z, x * y * z]
    scales = [1.0, span, span, span, span ** 2, span ** 2, span ** 2, span ** 3]
    values = np.empty((channels, resolution, resolution, resolution))
    for c in range(channels):
        coeff = rng.standard_normal(8)
        values[c] = sum(k / s * t for k, s, t in zip(coeff, scales, terms))
    roles = np.full(channels, ROLE_GENERIC, dtype=np.uint8)
    roles[0] = ROLE_DISTANCE
    return Field3D(values, roles)


def _probing_gradient_error(seed=0):
    rng = np.random.default_rng(seed)
    resolution = 8
    field = _random_multilinear_field(rng, resolution, channels=2)
    bank = FilterBank(rng.uniform(0.5, resolution - 1.5, size=(3, 4, 3)),
                      rng.standard_normal((3, 4, 2)), resolution)
    block = ProbingBlock(bank, sigma=1.5)
    projection = rng.standard_normal((1, bank.filter_count))

    def loss():
        return float((block.forward([field], train=True) * projection).sum())

    bank.zero_gradients()
    block.forward([field], train=True)
    block.backward(projection)
    worst = 0.0
    for values, analytic in ((bank.locations, bank.location_gradients.copy()),
                             (bank.weights, bank.weight_gradients.copy())):
        numeric = np.zeros_like(analytic)
        flat_v = values.reshape(-1)
        flat_n = numeric.reshape(-1)
        for i in range(flat_v.size):
            keep = flat_v[i]
            flat_v[i] = keep + 1e-4
            hi = loss()
            flat_v[i] = keep - 1e-4
            lo = loss()
            flat_v[i] = keep
            flat_n[i] = (hi - lo) / 2e-4
        worst = max(worst, block_error(analytic, numeric))
    return worst


def gradient_check_report(layer=None, seed=0):
    """Finite-difference audit of each layer kind, {name: max rel error}.

    `layer` restricts the audit to one entry: fc, bn, dropout, composed,
    or probing. Everything runs in double precision on tiny shapes; each
    entry draws from its own generator so the set stays stable when run
    individually.
    """

    def fc_check(rng):
        net = Network([FullyConnected(6, 4, rng, name="fc",
                                      dtype=np.float64)])
        return grad_check(net, rng.standard_normal((5, 6)))

    def bn_check(rng):
        net = Network([BatchNorm(5, name="bn", dtype=np.float64)])
        return grad_check(net, rng.standard_normal((8, 5)))

    def dropout_check(rng):
        net = Network([FullyConnected(6, 6, rng, name="fc",
                                      dtype=np.float64),
                       Dropout(0.4, name="drop")])
        return grad_check(net, rng.standard_normal((5, 6)))

    def composed_check(rng):
        # Stock head order (bn -> relu -> fc): an FC bias feeding a
        # BatchNorm has an identically-zero gradient (the mean subtraction
        # absorbs it), which a relative audit cannot score. Redraw until
        # every pre-activation clears the ReLU kink by a margin far above
        # the probe step, because finite differences lie across the kink.
        for _ in range(64):
            net = Network([
                BatchNorm(6, name="bn", dtype=np.float64),
                ReLU(name="relu"),
                FullyConnected(6, 8, rng, name="fc_a", dtype=np.float64),
                Dropout(0.3, name="drop"),
                FullyConnected(8, 3, rng, name="fc_b", dtype=np.float64),
            ])
            x = rng.standard_normal((6, 6))
            labels = rng.integers(0, 3, size=6)
            pre = net.layers[0].forward(x, train=True)
            if np.abs(pre).min() >= 3e-2:
                break
        return grad_check(net, x, labels=labels)

    recipes = {
        "fc": fc_check,
        "bn": bn_check,
        "dropout": dropout_check,
        "composed": composed_check,
        "probing": lambda rng: {"probing": _probing_gradient_error(seed)},
    }
    if layer is not None:
        if layer not in recipes:
            raise ValueError("unknown layer %r (choose from %s)"
                             % (layer, ", ".join(sorted(recipes))))
        recipes = {layer: recipes[layer]}
    report = {}
    for name, run in recipes.items():
        errors = run(np.random.default_rng([seed] + list(name.encode())))
        report[name] = max(errors.values())
    return report
