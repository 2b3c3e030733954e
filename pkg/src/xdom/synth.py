"""Synthetic capture generation with per-device hardware impairments.

Stands in for an over-the-air testbed: WiFi-like OFDM and Bluetooth-like
frequency-hopped GFSK bursts, distorted by a per-device impairment chain
(PA polynomial, IQ imbalance, carrier frequency offset, DC offset) and a
seeded multipath/noise channel. Each device's impairment parameters are the
"fingerprint" a classifier has to recover; devices of the same family are
drawn from tight distributions so the task is nontrivial.

The receiver model matches a wideband scanner parked at 2.414 GHz sampling
at 66.67 MS/s: WiFi bursts sit at a +33 MHz offset, Bluetooth hops across
79 channels at 1 MHz spacing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, resample_poly

from . import dataio

SAMPLE_RATE_DEFAULT = 200e6 / 3.0  # 66.67 MS/s
CAPTURE_CENTER_HZ = 2.414e9
WIFI_CENTER_HZ = 2.447e9  # channel 8
BT_BASE_HZ = 2.402e9
BT_CHANNELS = 79
BT_SYMBOL_RATE = 1e6
BT_HOP_RATE_DEFAULT = 1600.0
GFSK_MOD_INDEX = 0.32
GFSK_BT_PRODUCT = 0.5

OFDM_FFT = 64
OFDM_CP = 16
OFDM_OCCUPIED = 52
OFDM_BASEBAND_RATE = 20e6
OFDM_PREAMBLE_SYMBOLS = 2

FAMILY_A = "combo_chip_A"
FAMILY_B = "combo_chip_B"


@dataclass
class DeviceProfile:
    """Impairment parameters that constitute one device's RF signature."""

    device_id: int
    iq_gain_mismatch: float = 1.0  # g, ideal 1
    iq_phase_mismatch: float = 0.0  # theta, radians, ideal 0
    cfo_ppm: float = 0.0
    pa_a1: complex = 1.0 + 0.0j
    pa_a3: complex = 0.0 + 0.0j
    dc_offset: complex = 0.0 + 0.0j
    family: str = FAMILY_A

    def __post_init__(self):
        if self.iq_gain_mismatch <= 0:
            raise ValueError(f"iq gain mismatch must be positive, got {self.iq_gain_mismatch}")
        if abs(self.iq_phase_mismatch) >= np.pi / 4:
            raise ValueError(f"iq phase mismatch {self.iq_phase_mismatch} out of range (+-pi/4)")
        if abs(self.cfo_ppm) > 50:
            raise ValueError(f"cfo {self.cfo_ppm} ppm exceeds +-50 ppm")
        if abs(self.pa_a3) > 0.3 * abs(self.pa_a1):
            raise ValueError("pa_a3 leaves the weakly-nonlinear regime (|a3| > 0.3|a1|)")
        if self.family not in (FAMILY_A, FAMILY_B):
            raise ValueError(f"unknown device family {self.family!r}")


@dataclass
class ChannelProfile:
    """Multipath taps plus a noise level; `seed` realizes one environment."""

    taps: np.ndarray
    snr_db: float
    seed: int

    def __post_init__(self):
        self.taps = np.atleast_1d(np.asarray(self.taps, dtype=np.complex128))
        if self.taps.size < 1 or self.taps[0] == 0:
            raise ValueError("channel needs >= 1 tap with a nonzero leading tap")


@dataclass
class BurstSpec:
    protocol: str
    length: int
    center_freq: float = WIFI_CENTER_HZ
    sample_rate: float = SAMPLE_RATE_DEFAULT
    hop_rate: float = BT_HOP_RATE_DEFAULT

    def __post_init__(self):
        if self.protocol not in ("wifi_ofdm", "bt_fhss"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "bt_fhss" and self.hop_dwell() < 1:
            raise ValueError("hop dwell must be at least one sample")

    def hop_dwell(self):
        return round(self.sample_rate / self.hop_rate)


# Fixed preamble pattern, shared by every burst (known-symbol training field).
_PREAMBLE_BITS = np.asarray(
    np.random.default_rng(0x0FD).integers(0, 2, OFDM_OCCUPIED * OFDM_PREAMBLE_SYMBOLS) * 2 - 1,
    dtype=np.float64,
)


def _occupied_bins():
    """52 occupied subcarriers: +-1..+-26, DC unused."""
    return np.concatenate([np.arange(1, 27), np.arange(OFDM_FFT - 26, OFDM_FFT)])


def ofdm_baseband(n_symbols, payload_rng, zero_payload=False):
    """OFDM symbol stream at 20 MS/s: 64-point FFT grid, CP 16, QPSK data.

    The first two symbols carry a fixed known pattern; the rest carry QPSK
    payload (or zeros when `zero_payload`, a test hook).
    """
    if n_symbols < 1:
        raise ValueError("need at least one OFDM symbol")
    bins = _occupied_bins()
    grid = np.zeros((n_symbols + OFDM_PREAMBLE_SYMBOLS, OFDM_FFT), dtype=np.complex128)
    grid[:OFDM_PREAMBLE_SYMBOLS, bins] = _PREAMBLE_BITS.reshape(OFDM_PREAMBLE_SYMBOLS, -1)
    if not zero_payload:
        qpsk = (payload_rng.integers(0, 2, (n_symbols, OFDM_OCCUPIED)) * 2 - 1) + 1j * (
            payload_rng.integers(0, 2, (n_symbols, OFDM_OCCUPIED)) * 2 - 1
        )
        grid[OFDM_PREAMBLE_SYMBOLS:, bins] = qpsk / np.sqrt(2.0)
    symbols = np.fft.ifft(grid, axis=1)
    with_cp = np.concatenate([symbols[:, -OFDM_CP:], symbols], axis=1)
    return with_cp.reshape(-1)


def gen_ofdm_burst(spec, payload_rng, zero_payload=False):
    """WiFi-like burst at the capture rate, shifted to the channel offset.

    Baseband is generated at 20 MS/s, polyphase-resampled to the capture
    rate, mixed to (center_freq - capture center), and normalized to unit
    average power. Impairments are applied separately.
    """
    if isinstance(payload_rng, (int, np.integer)):
        payload_rng = np.random.default_rng(payload_rng)
    sym_len_out = (OFDM_FFT + OFDM_CP) * spec.sample_rate / OFDM_BASEBAND_RATE
    if spec.length < sym_len_out:
        raise ValueError(
            f"burst length {spec.length} shorter than one OFDM symbol ({sym_len_out:.0f} samples)"
        )
    n20 = math.ceil(spec.length * OFDM_BASEBAND_RATE / spec.sample_rate)
    n_symbols = math.ceil(n20 / (OFDM_FFT + OFDM_CP)) + 1
    base = ofdm_baseband(n_symbols, payload_rng, zero_payload=zero_payload)
    # 20 MS/s -> 66.67 MS/s is exactly 10/3.
    ratio = Fraction(spec.sample_rate / OFDM_BASEBAND_RATE).limit_denominator(64)
    resampled = resample_poly(base, ratio.numerator, ratio.denominator)
    x = resampled[: spec.length]
    offset = spec.center_freq - CAPTURE_CENTER_HZ
    n = np.arange(x.size)
    x = x * np.exp(2j * np.pi * offset * n / spec.sample_rate)
    power = np.mean(np.abs(x) ** 2)
    if power > 0:
        x = x / np.sqrt(power)
    return x


def _gaussian_pulse(sps):
    """Unit-area Gaussian filter for GFSK (BT-product 0.5), +-2 symbols."""
    bandwidth = GFSK_BT_PRODUCT * BT_SYMBOL_RATE
    sigma_t = np.sqrt(np.log(2.0)) / (2.0 * np.pi * bandwidth)
    half = int(2 * sps)
    t = np.arange(-half, half + 1) / (sps * BT_SYMBOL_RATE)
    h = np.exp(-(t**2) / (2.0 * sigma_t**2))
    return h / h.sum()


def gen_fhss_burst(spec, hop_rng):
    """Bluetooth-like frequency-hopped GFSK burst, constant envelope.

    Carriers are drawn uniformly from the 79 channels at 1 MHz spacing;
    phase is continuous across hop boundaries. Returns the commanded hop
    offsets (Hz, relative to the capture center) alongside the samples.
    """
    if isinstance(hop_rng, (int, np.integer)):
        hop_rng = np.random.default_rng(hop_rng)
    fs = spec.sample_rate
    sps = fs / BT_SYMBOL_RATE
    dwell = spec.hop_dwell()
    if dwell < sps:
        raise ValueError(f"hop dwell {dwell} shorter than one symbol ({sps:.1f} samples)")
    n = spec.length
    n_hops = math.ceil(n / dwell)
    channels = hop_rng.integers(0, BT_CHANNELS, n_hops)
    hop_offsets = BT_BASE_HZ + channels * 1e6 - CAPTURE_CENTER_HZ

    n_symbols = math.ceil(n / sps) + 4
    bits = hop_rng.integers(0, 2, n_symbols) * 2.0 - 1.0
    symbol_idx = np.minimum((np.arange(n) / sps).astype(np.int64), n_symbols - 1)
    nrz = bits[symbol_idx]
    shaped = fftconvolve(nrz, _gaussian_pulse(sps), mode="same")

    freq_dev = 0.5 * GFSK_MOD_INDEX * BT_SYMBOL_RATE * shaped
    freq_hop = hop_offsets[np.minimum(np.arange(n) // dwell, n_hops - 1)]
    phase = 2.0 * np.pi * np.cumsum(freq_dev + freq_hop) / fs
    return np.exp(1j * phase), hop_offsets


def apply_impairments(x, profile, sample_rate, center_freq=CAPTURE_CENTER_HZ):
    """Fixed-order device chain: PA polynomial, IQ imbalance, CFO, DC offset.

    Deterministic given the profile; an ideal profile is the identity.
    """
    x = np.asarray(x, dtype=np.complex128)
    y = profile.pa_a1 * x + profile.pa_a3 * x * np.abs(x) ** 2
    g = profile.iq_gain_mismatch
    theta = profile.iq_phase_mismatch
    # I + g*e^{j theta} * jQ, composed in real arithmetic.
    y = y.real + g * y.imag * (-np.sin(theta) + 1j * np.cos(theta))
    delta_f = profile.cfo_ppm * 1e-6 * center_freq
    y = y * np.exp(2j * np.pi * delta_f * np.arange(y.size) / sample_rate)
    return y + profile.dc_offset


def apply_channel(x, channel, stream=0):
    """FIR multipath then complex white noise at the profile's SNR."""
    x = np.asarray(x, dtype=np.complex128)
    y = np.convolve(x, channel.taps)[: x.size]
    if not np.isinf(channel.snr_db):
        rng = np.random.default_rng([int(channel.seed), int(stream)])
        p_sig = np.mean(np.abs(y) ** 2)
        p_noise = p_sig / 10.0 ** (channel.snr_db / 10.0)
        scale = np.sqrt(p_noise / 2.0)
        y = y + scale * (rng.standard_normal(y.size) + 1j * rng.standard_normal(y.size))
    return y


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

# Family parameter ranges. Family A models a shared-antenna combo chip with a
# rougher analog chain; family B a better-matched one. Same-family devices
# differ only by these draws, which is what makes fingerprinting nontrivial.
_FAMILY_RANGES = {
    FAMILY_A: {
        "gain_delta": 0.05,
        "phase_delta": 0.10,
        "a3_mag": (0.05, 0.14),
        "dc_mag": (0.004, 0.016),
        "cfo_ppm": 20.0,
    },
    FAMILY_B: {
        "gain_delta": 0.02,
        "phase_delta": 0.04,
        "a3_mag": (0.01, 0.05),
        "dc_mag": (0.002, 0.008),
        "cfo_ppm": 10.0,
    },
}


def draw_device_profiles(n_devices_a, n_devices_b, rng):
    """Draw per-device impairment profiles, family A first."""
    profiles = []
    for device_id in range(n_devices_a + n_devices_b):
        family = FAMILY_A if device_id < n_devices_a else FAMILY_B
        r = _FAMILY_RANGES[family]
        a3 = rng.uniform(*r["a3_mag"]) * np.exp(1j * rng.uniform(-np.pi / 6, np.pi / 6))
        dc = rng.uniform(*r["dc_mag"]) * np.exp(1j * rng.uniform(-np.pi, np.pi))
        profiles.append(
            DeviceProfile(
                device_id=device_id,
                iq_gain_mismatch=1.0 + rng.uniform(-r["gain_delta"], r["gain_delta"]),
                iq_phase_mismatch=rng.uniform(-r["phase_delta"], r["phase_delta"]),
                cfo_ppm=rng.uniform(-r["cfo_ppm"], r["cfo_ppm"]),
                pa_a3=a3,
                dc_offset=dc,
                family=family,
            )
        )
    return profiles


def _scenario_channel(master_seed, scenario_seed, device_id, rng):
    """Channel realization for one device in one scenario ("day")."""
    n_extra = rng.integers(1, 3)
    delays = rng.choice(np.arange(1, 6), size=n_extra, replace=False)
    taps = np.zeros(int(delays.max()) + 1, dtype=np.complex128)
    taps[0] = 1.0
    for d in delays:
        taps[d] = rng.uniform(0.1, 0.35) * np.exp(1j * rng.uniform(-np.pi, np.pi))
    seed = int(np.random.SeedSequence([master_seed, scenario_seed, device_id]).generate_state(1)[0])
    return taps, seed


@dataclass
class SynthConfig:
    n_devices_a: int = 8
    n_devices_b: int = 2
    frames_per_device_per_protocol: int = 100
    scenario_seeds: tuple = (0,)
    frame_len: int = dataio.FRAME_LEN_DEFAULT
    sample_rate: float = SAMPLE_RATE_DEFAULT
    seed: int = 0
    snr_db: tuple = (17.0, 23.0)  # per-scenario draw range
    cfo_drift_ppm: float = 1.5  # per-scenario oscillator drift (sigma)
    protocols: tuple = ("wifi", "bt")


def synth_dataset(out_dir, config=None, **overrides):
    """Generate captures plus a manifest under `out_dir`.

    Frames are cut from burst interiors (Bluetooth frames one hop apart so
    the hop carrier varies across examples) and written frame-packed, so
    every manifest entry is guaranteed to contain signal. Bit-identical
    output for identical config and seeds.
    """
    cfg = config or SynthConfig(**overrides)
    if config is not None and overrides:
        raise ValueError("pass either a SynthConfig or keyword overrides, not both")
    if cfg.frames_per_device_per_protocol <= 0:
        raise ValueError("zero frames requested")
    profiles = draw_device_profiles(
        cfg.n_devices_a, cfg.n_devices_b, np.random.default_rng([cfg.seed, 0xD0])
    )
    ids = [p.device_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate device ids")

    out_dir = Path(out_dir)
    cap_dir = out_dir / "captures"
    cap_dir.mkdir(parents=True, exist_ok=True)
    capture_paths = []

    for scenario_seed in cfg.scenario_seeds:
        scen_rng = np.random.default_rng([cfg.seed, 0xE0, scenario_seed])
        snr_db = scen_rng.uniform(*cfg.snr_db)
        for profile in profiles:
            dev_rng = np.random.default_rng([cfg.seed, 0xE1, scenario_seed, profile.device_id])
            taps, noise_seed = _scenario_channel(cfg.seed, scenario_seed, profile.device_id, dev_rng)
            channel = ChannelProfile(taps=taps, snr_db=snr_db, seed=noise_seed)
            drift = dev_rng.normal(0.0, cfg.cfo_drift_ppm)
            drifted = DeviceProfile(
                device_id=profile.device_id,
                iq_gain_mismatch=profile.iq_gain_mismatch,
                iq_phase_mismatch=profile.iq_phase_mismatch,
                cfo_ppm=float(np.clip(profile.cfo_ppm + drift, -50, 50)),
                pa_a1=profile.pa_a1,
                pa_a3=profile.pa_a3,
                dc_offset=profile.dc_offset,
                family=profile.family,
            )
            for proto_idx, protocol in enumerate(cfg.protocols):
                frames = _device_frames(
                    protocol, drifted, channel, cfg, scenario_seed, proto_idx
                )
                path = cap_dir / f"dev{profile.device_id:02d}_{protocol}_s{scenario_seed}.iq"
                meta = dataio.CaptureMeta(
                    sample_rate=cfg.sample_rate,
                    center_frequency=CAPTURE_CENTER_HZ,
                    device_id=profile.device_id,
                    protocol=protocol,
                    scenario_seed=int(scenario_seed),
                    datetime="",
                    extensions={
                        "packed_frames": True,
                        "frame_len": cfg.frame_len,
                        "family": profile.family,
                        "generator": "synthetic-impairment-v1",
                    },
                )
                dataio.write_capture(frames.reshape(-1), meta, path)
                capture_paths.append(path)

    manifest = dataio.build_manifest(
        capture_paths, out_dir / "manifest.json", frame_len=cfg.frame_len
    )
    return manifest


def _device_frames(protocol, profile, channel, cfg, scenario_seed, proto_idx):
    """Impaired, channel-filtered frames for one (device, protocol, scenario)."""
    n_frames = cfg.frames_per_device_per_protocol
    frame_len = cfg.frame_len
    burst_rng = np.random.default_rng(
        [cfg.seed, 0xE2, scenario_seed, profile.device_id, proto_idx]
    )
    skip = 64  # clear of filter/channel edge transients
    if protocol == "wifi":
        spec = BurstSpec(
            protocol="wifi_ofdm",
            length=skip + n_frames * frame_len + frame_len,
            center_freq=WIFI_CENTER_HZ,
            sample_rate=cfg.sample_rate,
        )
        clean = gen_ofdm_burst(spec, burst_rng)
        stride = frame_len
    elif protocol == "bt":
        stride = round(cfg.sample_rate / BT_HOP_RATE_DEFAULT)
        spec = BurstSpec(
            protocol="bt_fhss",
            length=skip + n_frames * stride + frame_len,
            center_freq=BT_BASE_HZ,
            sample_rate=cfg.sample_rate,
        )
        clean, _ = gen_fhss_burst(spec, burst_rng)
    else:
        raise ValueError(f"unknown protocol {protocol!r}")

    impaired = apply_impairments(clean, profile, cfg.sample_rate)
    received = apply_channel(impaired, channel, stream=proto_idx)
    starts = skip + stride * np.arange(n_frames)
    return np.stack([received[s : s + frame_len] for s in starts])
