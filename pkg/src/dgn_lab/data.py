"""Spike datasets: the portable event format, manifests, time binning and synthetic sets.

Event file grammar (UTF-8, LF line endings, one record per line)::

    <channels:int>,<duration_ms:float>,<label:int>
    <channel:int>,<time_ms:float>
    ...

Floats are written with Python's shortest round-trip ``repr`` so a canonical
file parses and re-serialises byte for byte. The manifest is canonical JSON
listing sample files relative to the manifest's directory, each with a split
tag.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DatasetFormatError
from .rng import STREAM_SYNTH, derive_rng

logger = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = 1
SPLITS = ("train", "test", "validation")


@dataclass(frozen=True)
class SpikeTensor:
    """Dense spike activity, ``values[channel, timestep]``; nonnegative and finite."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or 0 in values.shape:
            raise ValueError(f"spike tensor must be a non-empty 2-D array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("spike tensor contains non-finite values")
        if np.any(values < 0):
            raise ValueError("spike tensor contains negative values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, channels: int, timesteps: int) -> "SpikeTensor":
        return cls(np.zeros((channels, timesteps)))

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def timesteps(self) -> int:
        return self.values.shape[1]

    def padded(self, timesteps: int) -> "SpikeTensor":
        if timesteps < self.timesteps:
            raise ValueError("padding cannot shorten a tensor")
        out = np.zeros((self.channels, timesteps))
        out[:, : self.timesteps] = self.values
        return SpikeTensor(out)


@dataclass(frozen=True)
class EventSample:
    """One recording: ``(channel, time_ms)`` events over ``duration`` ms."""

    channels: int
    duration: float
    label: int
    events: tuple[tuple[int, float], ...] = ()

    def __post_init__(self) -> None:
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if not self.duration > 0 or not math.isfinite(self.duration):
            raise ValueError("duration must be positive and finite")
        if self.label < 0:
            raise ValueError("label must be zero or greater")
        events = tuple((int(channel), float(time)) for channel, time in self.events)
        for channel, time in events:
            _check_event(channel, time, self.channels, self.duration)
        object.__setattr__(self, "events", events)


def _check_event(channel: int, time: float, channels: int, duration: float) -> None:
    if not 0 <= channel < channels:
        raise ValueError(f"channel {channel} outside [0, {channels})")
    if not 0.0 <= time <= duration:
        raise ValueError(f"event time {time} outside [0, {duration}]")


class BinningMode(str, Enum):
    COUNT = "count"
    BINARY = "binary"


def time_bin(
    sample: EventSample,
    bin_ms: float,
    max_steps: int | None = None,
    mode: BinningMode = BinningMode.COUNT,
) -> SpikeTensor:
    """Aggregate events into ``[t*bin_ms, (t+1)*bin_ms)`` windows.

    An event exactly at ``duration`` falls in the last bin. ``max_steps`` pads
    with zeros or truncates; truncation that drops events logs a warning.
    """
    if not bin_ms > 0:
        raise ValueError("bin_ms must be positive")
    mode = BinningMode(mode)
    steps = max(1, math.ceil(sample.duration / bin_ms - 1e-9))
    values = np.zeros((sample.channels, steps))
    if sample.events:
        channels = np.array([channel for channel, _ in sample.events], dtype=np.int64)
        times = np.array([time for _, time in sample.events])
        if np.any(times < 0) or np.any(times > sample.duration):
            raise ValueError("event outside the sample duration")
        # Events on a window edge open the next window despite rounding in times / bin_ms.
        bins = np.minimum(np.floor(times / bin_ms + 1e-9).astype(np.int64), steps - 1)
        np.add.at(values, (channels, bins), 1.0)
    if mode is BinningMode.BINARY:
        values = (values > 0).astype(np.float64)
    if max_steps is not None:
        if max_steps < 1:
            raise ValueError("max_steps must be positive")
        if steps > max_steps:
            dropped = int(values[:, max_steps:].sum())
            if dropped:
                logger.warning(
                    "truncating sample to %d steps drops %d spikes", max_steps, dropped
                )
            values = values[:, :max_steps]
        elif steps < max_steps:
            values = np.pad(values, ((0, 0), (0, max_steps - steps)))
    return SpikeTensor(values)


def format_event_sample(sample: EventSample) -> str:
    lines = [f"{sample.channels},{float(sample.duration)!r},{sample.label}"]
    lines.extend(f"{channel},{time!r}" for channel, time in sample.events)
    return "\n".join(lines) + "\n"


def parse_event_sample(text: str, path: Path | str = "<string>") -> EventSample:
    if "\r" in text:
        raise DatasetFormatError(path, None, "line endings must be LF")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(path, 1, "missing header line")

    header = lines[0].split(",")
    if len(header) != 3:
        raise DatasetFormatError(path, 1, "header must be channels,duration_ms,label")
    try:
        channels, duration, label = int(header[0]), float(header[1]), int(header[2])
    except ValueError as exc:
        raise DatasetFormatError(path, 1, f"bad header: {exc}") from exc
    if channels < 1 or not duration > 0 or not math.isfinite(duration) or label < 0:
        raise DatasetFormatError(path, 1, "header values out of range")

    events: list[tuple[int, float]] = []
    for number, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 2:
            raise DatasetFormatError(path, number, "event line must be channel,time_ms")
        try:
            channel, time = int(fields[0]), float(fields[1])
        except ValueError as exc:
            raise DatasetFormatError(path, number, f"bad event: {exc}") from exc
        try:
            _check_event(channel, time, channels, duration)
        except ValueError as exc:
            raise DatasetFormatError(path, number, str(exc)) from exc
        events.append((channel, time))
    return EventSample(channels=channels, duration=duration, label=label, events=tuple(events))


def load_event_sample(path: Path) -> EventSample:
    return parse_event_sample(Path(path).read_text(encoding="utf-8"), path)


def save_event_sample(sample: EventSample, path: Path) -> None:
    Path(path).write_text(format_event_sample(sample), encoding="utf-8", newline="\n")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    split: str = "train"


@dataclass
class DatasetManifest:
    name: str
    channels: int
    num_classes: int
    samples: list[ManifestEntry] = field(default_factory=list)
    format_version: int = MANIFEST_FORMAT_VERSION

    def as_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "name": self.name,
            "channels": self.channels,
            "num_classes": self.num_classes,
            "samples": [{"path": entry.path, "split": entry.split} for entry in self.samples],
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, path: Path | str = "<string>") -> "DatasetManifest":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(path, exc.lineno, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(payload, dict):
            raise DatasetFormatError(path, None, "manifest must be a JSON object")
        expected = {"format_version", "name", "channels", "num_classes", "samples"}
        unknown = set(payload) - expected
        missing = expected - set(payload)
        if unknown or missing:
            raise DatasetFormatError(
                path, None, f"unknown keys {sorted(unknown)}, missing keys {sorted(missing)}"
            )
        if payload["format_version"] != MANIFEST_FORMAT_VERSION:
            raise DatasetFormatError(
                path, None, f"unsupported manifest version {payload['format_version']!r}"
            )
        entries = []
        for position, item in enumerate(payload["samples"]):
            if not isinstance(item, dict) or set(item) != {"path", "split"}:
                raise DatasetFormatError(path, None, f"samples[{position}] needs path and split")
            if item["split"] not in SPLITS:
                raise DatasetFormatError(
                    path, None, f"samples[{position}] has unknown split {item['split']!r}"
                )
            entries.append(ManifestEntry(path=str(item["path"]), split=item["split"]))
        channels, num_classes = payload["channels"], payload["num_classes"]
        if not isinstance(channels, int) or channels < 1:
            raise DatasetFormatError(path, None, "channels must be a positive integer")
        if not isinstance(num_classes, int) or num_classes < 1:
            raise DatasetFormatError(path, None, "num_classes must be a positive integer")
        return cls(
            name=str(payload["name"]),
            channels=channels,
            num_classes=num_classes,
            samples=entries,
        )


@dataclass(frozen=True)
class LabeledSample:
    x: SpikeTensor
    label: int
    split: str = "train"


@dataclass
class SpikeDataset:
    """Binned samples ready for the network, in deterministic order."""

    samples: list[LabeledSample]
    num_classes: int
    channels: int
    name: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> LabeledSample:
        return self.samples[index]

    def __iter__(self) -> Iterator[LabeledSample]:
        return iter(self.samples)

    @property
    def labels(self) -> list[int]:
        return [sample.label for sample in self.samples]

    def split(self, name: str) -> "SpikeDataset":
        return SpikeDataset(
            samples=[sample for sample in self.samples if sample.split == name],
            num_classes=self.num_classes,
            channels=self.channels,
            name=self.name,
        )


@dataclass
class EventDataset:
    manifest: DatasetManifest
    samples: list[EventSample]

    def __len__(self) -> int:
        return len(self.samples)

    def to_spike_dataset(
        self,
        bin_ms: float,
        max_steps: int | None = None,
        mode: BinningMode = BinningMode.COUNT,
    ) -> SpikeDataset:
        """Bin every sample; without ``max_steps`` pad to the longest sample."""
        tensors = [time_bin(sample, bin_ms, max_steps, mode) for sample in self.samples]
        if max_steps is None and tensors:
            longest = max(tensor.timesteps for tensor in tensors)
            tensors = [tensor.padded(longest) for tensor in tensors]
        labeled = [
            LabeledSample(x=tensor, label=sample.label, split=entry.split)
            for tensor, sample, entry in zip(tensors, self.samples, self.manifest.samples)
        ]
        return SpikeDataset(
            samples=labeled,
            num_classes=self.manifest.num_classes,
            channels=self.manifest.channels,
            name=self.manifest.name,
        )


def load_dataset(manifest_path: Path) -> EventDataset:
    """Load and validate every sample listed in a manifest, in manifest order."""
    manifest_path = Path(manifest_path)
    try:
        text = manifest_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetFormatError(manifest_path, None, f"cannot read manifest: {exc}") from exc
    manifest = DatasetManifest.from_json(text, manifest_path)
    base = manifest_path.parent
    samples = []
    for entry in manifest.samples:
        sample_path = base / entry.path
        try:
            sample = load_event_sample(sample_path)
        except OSError as exc:
            raise DatasetFormatError(sample_path, None, f"cannot read sample: {exc}") from exc
        if sample.channels != manifest.channels:
            raise DatasetFormatError(
                sample_path, 1, f"sample has {sample.channels} channels, manifest says {manifest.channels}"
            )
        if sample.label >= manifest.num_classes:
            raise DatasetFormatError(
                sample_path, 1, f"label {sample.label} out of range for {manifest.num_classes} classes"
            )
        samples.append(sample)
    logger.info("loaded %d samples from %s", len(samples), manifest_path)
    return EventDataset(manifest=manifest, samples=samples)


def save_dataset(
    samples: Sequence[EventSample],
    directory: Path,
    name: str,
    num_classes: int,
    splits: Sequence[str] | None = None,
) -> Path:
    """Write ``samples/<index>.evt`` files plus ``manifest.json``; returns the manifest path."""
    if not samples:
        raise ValueError("cannot infer channels from an empty sample list")
    directory = Path(directory)
    (directory / "samples").mkdir(parents=True, exist_ok=True)
    splits = list(splits) if splits is not None else ["train"] * len(samples)
    if len(splits) != len(samples):
        raise ValueError("splits must match samples one to one")
    entries = []
    width = len(str(len(samples) - 1))
    for index, (sample, split) in enumerate(zip(samples, splits)):
        relative = f"samples/{index:0{width}d}.evt"
        save_event_sample(sample, directory / relative)
        entries.append(ManifestEntry(path=relative, split=split))
    manifest = DatasetManifest(
        name=name, channels=samples[0].channels, num_classes=num_classes, samples=entries
    )
    manifest_path = directory / "manifest.json"
    manifest_path.write_text(manifest.to_json(), encoding="utf-8", newline="\n")
    return manifest_path


@dataclass(frozen=True)
class SynthSpec:
    """Class prototypes as random rasters; samples are jittered, thinned copies."""

    classes: int = 2
    channels: int = 20
    timesteps: int = 50
    rate: float = 0.1
    jitter: int = 1
    drop: float = 0.0
    samples_per_class: int = 20
    disjoint_channels: bool = False
    test_fraction: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("rate must lie in [0, 1]")
        if not 0.0 <= self.drop <= 1.0:
            raise ValueError("drop must lie in [0, 1]")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        if self.jitter < 0:
            raise ValueError("jitter must be zero or greater")
        if min(self.classes, self.channels, self.timesteps, self.samples_per_class) < 1:
            raise ValueError("classes, channels, timesteps and samples_per_class must be positive")
        if self.disjoint_channels and self.channels < self.classes:
            raise ValueError("disjoint channels need at least one channel per class")


def _prototypes(spec: SynthSpec, rng: np.random.Generator) -> list[np.ndarray]:
    prototypes = []
    blocks = np.array_split(np.arange(spec.channels), spec.classes)
    for label in range(spec.classes):
        raster = (rng.random((spec.channels, spec.timesteps)) < spec.rate).astype(np.float64)
        if spec.disjoint_channels:
            mask = np.zeros(spec.channels, dtype=bool)
            mask[blocks[label]] = True
            raster[~mask] = 0.0
        prototypes.append(raster)
    return prototypes


def _perturbed_copy(prototype: np.ndarray, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    channels, steps = np.nonzero(prototype)
    counts = prototype[channels, steps]
    keep = rng.random(channels.size) >= spec.drop
    shifts = rng.integers(-spec.jitter, spec.jitter + 1, size=channels.size)
    steps = np.clip(steps + shifts, 0, spec.timesteps - 1)
    raster = np.zeros_like(prototype)
    np.add.at(raster, (channels[keep], steps[keep]), counts[keep])
    return raster


def _split_for(index: int, spec: SynthSpec) -> str:
    n_test = int(round(spec.samples_per_class * spec.test_fraction))
    return "test" if index >= spec.samples_per_class - n_test else "train"


def synth_pattern_dataset(spec: SynthSpec, seed: int) -> SpikeDataset:
    """Deterministic desk-scale classification set; samples interleave classes."""
    rng = derive_rng(seed, STREAM_SYNTH)
    prototypes = _prototypes(spec, rng)
    samples = []
    for index in range(spec.samples_per_class):
        for label, prototype in enumerate(prototypes):
            samples.append(
                LabeledSample(
                    x=SpikeTensor(_perturbed_copy(prototype, spec, rng)),
                    label=label,
                    split=_split_for(index, spec),
                )
            )
    return SpikeDataset(
        samples=samples, num_classes=spec.classes, channels=spec.channels, name="synthetic"
    )


def raster_to_events(raster: np.ndarray, label: int, bin_ms: float = 1.0) -> EventSample:
    """Events at ``t * bin_ms`` repeated by count; ``time_bin`` with ``bin_ms`` recovers ``raster``."""
    events = []
    for step in range(raster.shape[1]):
        for channel in np.nonzero(raster[:, step])[0]:
            events.extend([(int(channel), step * bin_ms)] * int(raster[channel, step]))
    return EventSample(
        channels=raster.shape[0],
        duration=raster.shape[1] * bin_ms,
        label=label,
        events=tuple(events),
    )


def synth_event_dataset(spec: SynthSpec, seed: int, bin_ms: float = 1.0) -> tuple[list[EventSample], list[str]]:
    """Event-format rendition of ``synth_pattern_dataset`` plus each sample's split tag."""
    dataset = synth_pattern_dataset(spec, seed)
    events = [raster_to_events(sample.x.values, sample.label, bin_ms) for sample in dataset]
    return events, [sample.split for sample in dataset]
