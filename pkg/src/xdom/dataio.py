"""Capture persistence, frame segmentation, and dataset manifests.

Captures are stored SigMF-style: a raw `.iq` file of interleaved
little-endian float32 (I, Q) pairs next to a `.json` sidecar holding the
recording metadata. A dataset manifest lists every extracted frame as a
(file, sample offset) pair plus its labels, with dense id vocabularies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

DATATYPE = "cf32_le"
FRAME_LEN_DEFAULT = 1024
ENERGY_GATE_DB_DEFAULT = 6.0


class CaptureFormatError(ValueError):
    """Raised for corrupt or unsupported capture files."""


@dataclass
class CaptureMeta:
    sample_rate: float
    center_frequency: float
    device_id: int
    protocol: str
    scenario_seed: int
    datetime: str = ""
    datatype: str = DATATYPE
    extensions: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.datatype != DATATYPE:
            raise CaptureFormatError(f"unsupported datatype {self.datatype!r}")


@dataclass
class IQFrame:
    """One example: a fixed-length complex slice of a capture plus labels."""

    samples: np.ndarray
    device_id: int
    protocol: str
    scenario_seed: int
    source_capture: str
    offset: int


def write_capture(samples, meta, path):
    """Write samples as cf32_le plus a JSON metadata sidecar.

    `path` is the data file (`.iq`); the sidecar replaces the suffix with
    `.json`. Non-finite samples are rejected.
    """
    samples = np.asarray(samples, dtype=np.complex64)
    if not np.all(np.isfinite(samples.view(np.float32))):
        raise ValueError("refusing to write non-finite samples")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    interleaved = np.empty(2 * samples.size, dtype="<f4")
    interleaved[0::2] = samples.real
    interleaved[1::2] = samples.imag
    path.write_bytes(interleaved.tobytes())
    sidecar = dict(asdict(meta))
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def read_capture(path):
    """Inverse of write_capture: returns (samples complex64, CaptureMeta)."""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise CaptureFormatError(f"missing metadata sidecar for {path}")
    meta_dict = json.loads(sidecar.read_text())
    if meta_dict.get("datatype") != DATATYPE:
        raise CaptureFormatError(f"unsupported datatype {meta_dict.get('datatype')!r} in {sidecar}")
    raw = path.read_bytes()
    if len(raw) % 8 != 0:
        raise CaptureFormatError(f"truncated capture {path}: {len(raw)} bytes is not a multiple of 8")
    interleaved = np.frombuffer(raw, dtype="<f4")
    samples = (interleaved[0::2] + 1j * interleaved[1::2]).astype(np.complex64)
    meta = CaptureMeta(**meta_dict)
    return samples, meta


def read_frame(path, offset, frame_len):
    """Read frame_len complex samples starting at a sample offset."""
    with open(path, "rb") as fh:
        fh.seek(8 * offset)
        raw = fh.read(8 * frame_len)
    if len(raw) != 8 * frame_len:
        raise CaptureFormatError(f"frame at offset {offset} overruns {path}")
    interleaved = np.frombuffer(raw, dtype="<f4")
    return (interleaved[0::2] + 1j * interleaved[1::2]).astype(np.complex64)


def segment_capture(samples, meta, frame_len=FRAME_LEN_DEFAULT, energy_gate_db=ENERGY_GATE_DB_DEFAULT):
    """Cut non-overlapping frames, keeping those above the energy gate.

    The noise floor is the 10th percentile of per-frame mean power; frames
    with mean power >= floor + energy_gate_db are kept.
    """
    samples = np.asarray(samples)
    if samples.size < frame_len:
        raise ValueError(f"capture of {samples.size} samples is shorter than one frame ({frame_len})")
    n_frames = samples.size // frame_len
    chunks = samples[: n_frames * frame_len].reshape(n_frames, frame_len)
    power = np.mean(np.abs(chunks) ** 2, axis=1)
    floor = np.percentile(power, 10)
    threshold = floor * 10.0 ** (energy_gate_db / 10.0)
    kept = np.nonzero(power >= threshold)[0]
    return [
        IQFrame(
            samples=chunks[i],
            device_id=meta.device_id,
            protocol=meta.protocol,
            scenario_seed=meta.scenario_seed,
            source_capture="",
            offset=int(i * frame_len),
        )
        for i in kept
    ]


@dataclass
class DatasetManifest:
    """Frame index for a dataset: labels plus (file, offset) locations."""

    frame_len: int
    sample_rate: float
    devices: list
    protocols: list
    scenarios: list
    frames: list  # dicts: file, offset, device_id, protocol, scenario_seed
    root: str = ""

    def __len__(self):
        return len(self.frames)

    def device_index(self, device_id):
        return self.devices.index(device_id)

    def protocol_index(self, protocol):
        return self.protocols.index(protocol)

    def frame_samples(self, i):
        rec = self.frames[i]
        return read_frame(Path(self.root) / rec["file"], rec["offset"], self.frame_len)

    def labels(self):
        """(device_index, protocol_index, scenario_seed) per frame."""
        return [
            (self.device_index(r["device_id"]), self.protocol_index(r["protocol"]), r["scenario_seed"])
            for r in self.frames
        ]

    def subset(self, protocol=None, scenario_seeds=None):
        """Indices of frames matching the given protocol/scenario filters."""
        idx = []
        for i, r in enumerate(self.frames):
            if protocol is not None and r["protocol"] != protocol:
                continue
            if scenario_seeds is not None and r["scenario_seed"] not in scenario_seeds:
                continue
            idx.append(i)
        return np.asarray(idx, dtype=np.int64)

    def to_json(self):
        return json.dumps(
            {
                "version": 1,
                "frame_len": self.frame_len,
                "sample_rate": self.sample_rate,
                "devices": self.devices,
                "protocols": self.protocols,
                "scenarios": self.scenarios,
                "frames": self.frames,
            },
            indent=1,
            sort_keys=True,
        )

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(
            frame_len=d["frame_len"],
            sample_rate=d["sample_rate"],
            devices=d["devices"],
            protocols=d["protocols"],
            scenarios=d["scenarios"],
            frames=d["frames"],
            root=str(Path(path).parent),
        )


def _capture_frame_offsets(samples, meta, frame_len, energy_gate_db):
    """Frame offsets for one capture.

    Frame-packed captures (written by the synthesizer) are consecutive kept
    frames by construction; raw captures go through the energy gate.
    """
    if meta.extensions.get("packed_frames"):
        n = samples.size // frame_len
        return [i * frame_len for i in range(n)]
    return [f.offset for f in segment_capture(samples, meta, frame_len, energy_gate_db)]


def build_manifest(capture_paths, out_path, frame_len=FRAME_LEN_DEFAULT,
                   energy_gate_db=ENERGY_GATE_DB_DEFAULT):
    """Index a list of captures into a manifest file.

    Ordering is deterministic: captures sorted by path, offsets ascending.
    """
    if not capture_paths:
        raise ValueError("no captures given")
    paths = [Path(p) for p in capture_paths]
    if len(set(paths)) != len(paths):
        raise ValueError("duplicate capture path in input list")
    out_path = Path(out_path)
    root = out_path.parent

    frames = []
    devices = set()
    protocols = set()
    scenarios = set()
    sample_rate = None
    for path in sorted(paths):
        samples, meta = read_capture(path)
        sample_rate = meta.sample_rate if sample_rate is None else sample_rate
        devices.add(meta.device_id)
        protocols.add(meta.protocol)
        scenarios.add(meta.scenario_seed)
        rel = path.relative_to(root) if path.is_relative_to(root) else path
        for offset in _capture_frame_offsets(samples, meta, frame_len, energy_gate_db):
            frames.append(
                {
                    "file": str(rel),
                    "offset": int(offset),
                    "device_id": meta.device_id,
                    "protocol": meta.protocol,
                    "scenario_seed": meta.scenario_seed,
                }
            )
    manifest = DatasetManifest(
        frame_len=frame_len,
        sample_rate=float(sample_rate),
        devices=sorted(devices),
        protocols=sorted(protocols),
        scenarios=sorted(scenarios),
        frames=frames,
        root=str(root),
    )
    manifest.save(out_path)
    return manifest
