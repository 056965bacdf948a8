"""Synthetic RF emitter fleet: bursts, impairments, slicing, and splits.

Every device transmits the same waveform — root-raised-cosine-shaped QPSK
(roll-off 0.35, 8 samples/symbol) — so the only class-separating signal is
the device's hardware impairment chain, applied in a fixed order:

    PA nonlinearity -> IQ imbalance -> DC offset -> CFO phasor
    -> ON/OFF ramp transients -> AWGN

Each burst also carries a uniformly random carrier phase (a nuisance every
receiver faces): it hides nothing about the device but forces a classifier
to either learn phase invariance or waste capacity memorizing phases.

Pulse shaping runs on the DFT grid with the exact square-root raised-cosine
spectrum, so a matched filter recovers the constellation to rounding error —
handy for oracle tests. Datasets split at the burst level (3:1:1 for known
devices; unknown devices appear only in test), so no slice of one burst can
leak across splits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

SPS = 8                 # samples per symbol
ROLLOFF = 0.35
FORMAT_VERSION = "proto-osr.dataset.v1"
IQ_MAGIC = b"PIQ1"
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Dataset configuration violates its constraints."""


class IQFormatError(ValueError):
    """IQ file or manifest does not match the on-disk format."""


# ------------------------------------------------------------------ devices

@dataclass(frozen=True)
class ImpairmentRanges:
    """Draw ranges (lo, hi) for each device impairment.

    The defaults keep the carrier offset small enough that a slice's I/Q
    frame barely rotates, so gain/skew/DC signatures stay measurable within
    one slice; the remaining axes are wide enough that neighboring devices
    differ by more than single-slice estimation noise.
    """
    gain_db: tuple = (-9.0, 9.0)
    phase_skew: tuple = (-0.7, 0.7)
    cfo: tuple = (-1e-5, 1e-5)
    dc_mag: tuple = (0.0, 0.45)
    pa_coeff: tuple = (0.0, 0.65)
    transient: tuple = (16, 48)

    def __post_init__(self):
        for name in ("gain_db", "phase_skew", "cfo", "dc_mag", "pa_coeff", "transient"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise DatasetError(f"degenerate range for {name}: ({lo}, {hi})")
        if self.dc_mag[0] < 0 or self.pa_coeff[0] < 0 or self.transient[0] < 0:
            raise DatasetError("dc_mag, pa_coeff and transient ranges must be non-negative")


@dataclass(frozen=True)
class DeviceProfile:
    """One emitter's hardware fingerprint."""
    device_id: str
    gain_db: float
    phase_skew: float
    cfo: float
    dc_offset: complex
    pa_coeff: float
    transient_len: int

    def __post_init__(self):
        vals = [self.gain_db, self.phase_skew, self.cfo,
                self.dc_offset.real, self.dc_offset.imag, self.pa_coeff]
        if not all(np.isfinite(v) for v in vals):
            raise DatasetError(f"non-finite impairment in profile {self.device_id}")
        if abs(self.cfo) >= 0.01:
            raise DatasetError(f"|cfo| must be < 0.01, got {self.cfo}")
        if self.pa_coeff < 0:
            raise DatasetError(f"pa_coeff must be >= 0, got {self.pa_coeff}")
        if self.transient_len < 0:
            raise DatasetError(f"transient_len must be >= 0, got {self.transient_len}")

    def to_dict(self) -> dict:
        return {"device_id": self.device_id, "gain_db": self.gain_db,
                "phase_skew": self.phase_skew, "cfo": self.cfo,
                "dc_offset": [self.dc_offset.real, self.dc_offset.imag],
                "pa_coeff": self.pa_coeff, "transient_len": self.transient_len}

    @staticmethod
    def from_dict(d: dict) -> "DeviceProfile":
        return DeviceProfile(device_id=d["device_id"], gain_db=float(d["gain_db"]),
                             phase_skew=float(d["phase_skew"]), cfo=float(d["cfo"]),
                             dc_offset=complex(d["dc_offset"][0], d["dc_offset"][1]),
                             pa_coeff=float(d["pa_coeff"]),
                             transient_len=int(d["transient_len"]))


@dataclass(frozen=True)
class Fleet:
    known: tuple
    unknown: tuple

    @property
    def all_profiles(self) -> tuple:
        return self.known + self.unknown


def make_fleet(n_known: int, n_unknown: int, seed: int,
               ranges: ImpairmentRanges = ImpairmentRanges()) -> Fleet:
    """Draw a deterministic fleet of pairwise-distinct device profiles.

    Each impairment axis gets one stratified cell per device (a Latin
    hypercube draw), so every axis spreads the whole fleet evenly instead
    of leaving near-duplicate neighbors to chance.
    """
    if n_known < 2 or n_unknown < 1:
        raise DatasetError(f"need n_known >= 2 and n_unknown >= 1, got {n_known}, {n_unknown}")
    n = n_known + n_unknown
    rng = np.random.default_rng([int(seed), 0xF1EE7])

    def axis(lo, hi):
        cells = rng.permutation(n)
        jitter = rng.uniform(0.25, 0.75, n)
        return lo + (hi - lo) * (cells + jitter) / n

    gain = axis(*ranges.gain_db)
    skew = axis(*ranges.phase_skew)
    cfo = axis(*ranges.cfo)
    dc_mag = axis(*ranges.dc_mag)
    dc_phase = rng.uniform(0.0, 2.0 * np.pi, n)
    pa = axis(*ranges.pa_coeff)
    transient = np.round(axis(*ranges.transient)).astype(int)
    order = rng.permutation(n)
    profiles = []
    for i, j in enumerate(order):
        profiles.append(DeviceProfile(
            device_id=f"dev{i:02d}",
            gain_db=float(gain[j]),
            phase_skew=float(skew[j]),
            cfo=float(cfo[j]),
            dc_offset=complex(dc_mag[j] * np.cos(dc_phase[j]),
                              dc_mag[j] * np.sin(dc_phase[j])),
            pa_coeff=float(pa[j]),
            transient_len=int(transient[j]),
        ))
    if len({json.dumps(p.to_dict(), sort_keys=True) for p in profiles}) != len(profiles):
        raise DatasetError("fleet draw produced duplicate profiles; widen the ranges")
    return Fleet(known=tuple(profiles[:n_known]), unknown=tuple(profiles[n_known:]))


# ------------------------------------------------------------------- bursts

@dataclass
class IQBurst:
    """One contiguous transmission: ramp on, steady state, ramp off."""
    samples: np.ndarray
    device_id: str
    split: str = "test"
    known: bool = False

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise DatasetError(f"burst samples must be 1-D, got shape {self.samples.shape}")
        if not np.isfinite(self.samples).all():
            raise DatasetError(f"non-finite sample in burst from {self.device_id}")
        if self.split not in SPLITS:
            raise DatasetError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not self.known and self.split != "test":
            raise DatasetError("unknown-device bursts may only appear in the test split")


def rrc_spectrum(n: int, sps: int = SPS, beta: float = ROLLOFF) -> np.ndarray:
    """Square-root raised-cosine amplitude response on the length-n DFT grid."""
    f = np.abs(np.fft.fftfreq(n))          # cycles per sample
    f1 = (1.0 - beta) / (2.0 * sps)
    f2 = (1.0 + beta) / (2.0 * sps)
    h = np.zeros(n)
    h[f <= f1] = 1.0
    mid = (f > f1) & (f < f2)
    h[mid] = 0.5 * (1.0 + np.cos(np.pi * sps / beta * (f[mid] - f1)))
    return np.sqrt(h)


def shape_symbols(symbols: np.ndarray, n: int) -> np.ndarray:
    """Upsample QPSK symbols to n samples and pulse-shape on the DFT grid."""
    x = np.zeros(n, dtype=np.complex128)
    x[: symbols.size * SPS : SPS] = symbols
    return np.fft.ifft(np.fft.fft(x) * rrc_spectrum(n))


def matched_filter(samples: np.ndarray) -> np.ndarray:
    """Apply the receive-side root-raised-cosine; symbols sit at k*SPS."""
    samples = np.asarray(samples, dtype=np.complex128)
    return np.fft.ifft(np.fft.fft(samples) * rrc_spectrum(samples.size))


def synthesize_burst(profile: DeviceProfile, payload_seed: int, length: int,
                     snr_db: float | None, split: str = "test",
                     known: bool = False) -> IQBurst:
    """Generate one burst of ``length`` samples from a device profile.

    ``snr_db`` of None (or +inf) disables noise. The random carrier phase,
    payload symbols, and noise all derive from ``payload_seed`` alone, so a
    burst can be regenerated exactly — including a twin with one impairment
    changed but identical payload and phase.
    """
    if length < 256:
        raise DatasetError(f"burst length must be >= 256, got {length}")
    if profile.transient_len * 4 >= length:
        raise DatasetError(
            f"transient length {profile.transient_len} too long for burst of {length}")
    n = ((length + SPS - 1) // SPS) * SPS          # DFT grid multiple of SPS
    rng = np.random.default_rng([int(payload_seed), 0x51691A1])
    symbols = (rng.integers(0, 2, size=n // SPS) * 2 - 1 +
               1j * (rng.integers(0, 2, size=n // SPS) * 2 - 1)) / np.sqrt(2.0)
    theta = rng.uniform(0.0, 2.0 * np.pi)          # per-burst carrier phase
    x = shape_symbols(symbols, n)[:length]
    x /= np.sqrt(np.mean(np.abs(x) ** 2))          # unit power before impairments
    x = x * np.exp(1j * theta)

    # impairment chain
    y = x * (1.0 - profile.pa_coeff * np.abs(x) ** 2)
    g = 10.0 ** (profile.gain_db / 20.0)
    i_br, q_br = y.real, g * y.imag
    y = (i_br - q_br * np.sin(profile.phase_skew)) + 1j * (q_br * np.cos(profile.phase_skew))
    y = y + profile.dc_offset
    if profile.cfo != 0.0:
        y = y * np.exp(2j * np.pi * profile.cfo * np.arange(length))
    t = profile.transient_len
    if t > 0:
        ramp = np.arange(1, t + 1) / t
        y[:t] *= ramp
        y[-t:] *= ramp[::-1]
    if snr_db is not None and np.isfinite(snr_db):
        p_sig = np.mean(np.abs(y) ** 2)
        p_noise = p_sig / (10.0 ** (snr_db / 10.0))
        noise = rng.standard_normal(length) + 1j * rng.standard_normal(length)
        y = y + noise * np.sqrt(p_noise / 2.0)
    return IQBurst(samples=y, device_id=profile.device_id, split=split, known=known)


def burst_to_iq(burst: IQBurst) -> np.ndarray:
    """Complex burst as a real [2, L] I/Q array."""
    return np.stack([burst.samples.real, burst.samples.imag])


# ------------------------------------------------------------------ dataset

def _split_counts(bursts_per_device: int):
    """Largest-remainder 3:1:1 allocation; every split must be nonempty."""
    props = (0.6, 0.2, 0.2)
    floors = [int(math.floor(p * bursts_per_device)) for p in props]
    rema = [p * bursts_per_device - f for p, f in zip(props, floors)]
    short = bursts_per_device - sum(floors)
    for idx in sorted(range(3), key=lambda i: -rema[i])[:short]:
        floors[idx] += 1
    if min(floors) < 1:
        raise DatasetError(
            f"{bursts_per_device} bursts per device cannot honor a 3:1:1 split")
    return tuple(floors)   # (train, val, test)


@dataclass
class Dataset:
    """Materialized slices plus the manifest and raw burst store."""
    manifest: dict
    bursts: list
    train_x: np.ndarray
    train_y: np.ndarray
    train_burst: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    val_burst: np.ndarray
    test_known_x: np.ndarray
    test_known_y: np.ndarray
    test_known_burst: np.ndarray
    test_unknown_x: np.ndarray
    test_unknown_device: np.ndarray
    test_unknown_burst: np.ndarray

    @property
    def n_classes(self) -> int:
        return int(sum(1 for d in self.manifest["devices"] if d["known"]))

    @property
    def slice_len(self) -> int:
        return int(self.manifest["slice_len"])


def build_dataset(fleet: Fleet, bursts_per_device: int, slices_per_burst: int,
                  slice_len: int, snr_db: float | None, seed: int,
                  include_transients: bool = False) -> Dataset:
    """Synthesize bursts for a fleet and slice them into model-ready records.

    Burst length is sized so the steady state holds ``slices_per_burst``
    slice lengths; slice offsets are drawn uniformly inside the steady state
    (inside the whole burst with ``include_transients``). Known devices split
    3:1:1 at the burst level; unknown devices go wholly to test.
    """
    if slices_per_burst < 1 or slice_len < 1:
        raise DatasetError("need at least one slice of positive length")
    n_train_b, n_val_b, n_test_b = _split_counts(bursts_per_device)
    max_transient = max(p.transient_len for p in fleet.all_profiles)
    steady = slices_per_burst * slice_len
    burst_len = ((steady + 2 * max_transient + SPS - 1) // SPS) * SPS
    burst_len = max(burst_len, 256)
    if steady < slice_len:
        raise DatasetError("steady-state portion shorter than one slice")

    rng = np.random.default_rng([int(seed), 0xDA7A])
    buckets = {name: ([], [], []) for name in ("train", "val", "test_known", "test_unknown")}
    bursts = []
    burst_rows = []
    uid = 0
    for class_id, profile in enumerate(fleet.known):
        split_tags = (["train"] * n_train_b + ["val"] * n_val_b + ["test"] * n_test_b)
        order = rng.permutation(bursts_per_device)
        for b in range(bursts_per_device):
            split = split_tags[order[b]]
            payload_seed = int(rng.integers(0, 2 ** 62))
            burst = synthesize_burst(profile, payload_seed, burst_len, snr_db,
                                     split=split, known=True)
            offsets = _slice_into(burst, uid, class_id, slices_per_burst, slice_len,
                                  include_transients, profile.transient_len, rng,
                                  buckets["test_known" if split == "test" else split])
            bursts.append(burst)
            burst_rows.append({"device_id": profile.device_id, "split": split,
                               "known": True, "payload_seed": payload_seed,
                               "uid": uid, "slice_offsets": offsets})
            uid += 1
    for profile in fleet.unknown:
        for b in range(bursts_per_device):
            payload_seed = int(rng.integers(0, 2 ** 62))
            burst = synthesize_burst(profile, payload_seed, burst_len, snr_db,
                                     split="test", known=False)
            offsets = _slice_into(burst, uid, profile.device_id, slices_per_burst,
                                  slice_len, include_transients,
                                  profile.transient_len, rng,
                                  buckets["test_unknown"])
            bursts.append(burst)
            burst_rows.append({"device_id": profile.device_id, "split": "test",
                               "known": False, "payload_seed": payload_seed,
                               "uid": uid, "slice_offsets": offsets})
            uid += 1

    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "snr_db": None if snr_db is None or not np.isfinite(snr_db) else float(snr_db),
        "slice_len": int(slice_len),
        "slices_per_burst": int(slices_per_burst),
        "bursts_per_device": int(bursts_per_device),
        "burst_len": int(burst_len),
        "sps": SPS,
        "rolloff": ROLLOFF,
        "include_transients": bool(include_transients),
        "split_counts": {"train": n_train_b, "val": n_val_b, "test": n_test_b},
        "devices": ([dict(p.to_dict(), known=True, class_id=i)
                     for i, p in enumerate(fleet.known)] +
                    [dict(p.to_dict(), known=False) for p in fleet.unknown]),
        "bursts": burst_rows,
    }

    def pack(name, label_dtype):
        xs, ys, uids = buckets[name]
        if not xs:
            return (np.zeros((0, 2, slice_len)), np.zeros(0, dtype=label_dtype),
                    np.zeros(0, dtype=int))
        return np.stack(xs), np.asarray(ys, dtype=label_dtype), np.asarray(uids, dtype=int)

    tr = pack("train", int)
    va = pack("val", int)
    tk = pack("test_known", int)
    tu = pack("test_unknown", object)
    return Dataset(manifest=manifest, bursts=bursts,
                   train_x=tr[0], train_y=tr[1], train_burst=tr[2],
                   val_x=va[0], val_y=va[1], val_burst=va[2],
                   test_known_x=tk[0], test_known_y=tk[1], test_known_burst=tk[2],
                   test_unknown_x=tu[0], test_unknown_device=tu[1], test_unknown_burst=tu[2])


def _slice_into(burst, uid, label, slices_per_burst, slice_len,
                include_transients, transient_len, rng, bucket):
    lo = 0 if include_transients else transient_len
    hi = burst.samples.size - slice_len - (0 if include_transients else transient_len)
    if hi < lo:
        raise DatasetError("slices do not fit within the steady-state portion")
    iq = burst_to_iq(burst)
    xs, ys, uids = bucket
    offsets = [int(s) for s in rng.integers(lo, hi + 1, size=slices_per_burst)]
    for start in offsets:
        xs.append(iq[:, start:start + slice_len].copy())
        ys.append(label)
        uids.append(uid)
    return offsets


# ------------------------------------------------------------------ storage

def write_iq(path: str, bursts: list) -> None:
    """Write bursts as little-endian float32 interleaved I/Q with a header."""
    if not bursts:
        raise IQFormatError("refusing to write an empty burst store")
    lengths = {b.samples.size for b in bursts}
    if len(lengths) != 1:
        raise IQFormatError(f"bursts must share one length, got {sorted(lengths)}")
    (length,) = lengths
    header = IQ_MAGIC + np.array([length, len(bursts), 0], dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        for b in bursts:
            pairs = np.empty(2 * length, dtype="<f4")
            pairs[0::2] = b.samples.real
            pairs[1::2] = b.samples.imag
            fh.write(pairs.tobytes())


def load_iq(path: str, manifest: dict) -> list:
    """Read a burst store back; labels and splits come from the manifest."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise IQFormatError(f"file truncated inside the 16-byte header at offset {len(raw)}")
    if raw[:4] != IQ_MAGIC:
        raise IQFormatError(f"bad magic {raw[:4]!r} at offset 0, expected {IQ_MAGIC!r}")
    length, count, _reserved = np.frombuffer(raw[4:16], dtype="<u4")
    expected = 16 + int(count) * int(length) * 8
    if len(raw) != expected:
        raise IQFormatError(
            f"expected {expected} bytes for {count} bursts of {length} samples, "
            f"file ends at offset {len(raw)}")
    rows = manifest.get("bursts", [])
    if len(rows) != count:
        raise IQFormatError(
            f"manifest lists {len(rows)} bursts but file holds {count}")
    bursts = []
    for i in range(int(count)):
        off = 16 + i * int(length) * 8
        pairs = np.frombuffer(raw[off: off + int(length) * 8], dtype="<f4")
        samples = pairs[0::2].astype(np.float64) + 1j * pairs[1::2].astype(np.float64)
        row = rows[i]
        bursts.append(IQBurst(samples=samples, device_id=row["device_id"],
                              split=row["split"], known=row["known"]))
    return bursts


def save_dataset(ds: Dataset, directory) -> None:
    """Write the burst store and manifest into a directory."""
    import os
    os.makedirs(directory, exist_ok=True)
    write_iq(os.path.join(directory, "bursts.piq"), ds.bursts)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(ds.manifest, fh, indent=1, sort_keys=True)


def load_dataset(directory) -> Dataset:
    """Rebuild a Dataset from a stored burst store + manifest.

    Slices are re-cut from the stored bursts at the offsets recorded in the
    manifest, so a loaded dataset slices exactly like the one that was saved
    (sample values pass through float32 storage).
    """
    import os
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IQFormatError(f"unsupported manifest version {manifest.get('format_version')!r}")
    bursts = load_iq(os.path.join(directory, "bursts.piq"), manifest)
    class_of = {d["device_id"]: d.get("class_id") for d in manifest["devices"]}
    slice_len = int(manifest["slice_len"])
    buckets = {name: ([], [], []) for name in ("train", "val", "test_known", "test_unknown")}
    for row, burst in zip(manifest["bursts"], bursts):
        if row["known"]:
            name = "test_known" if row["split"] == "test" else row["split"]
            label = class_of[row["device_id"]]
        else:
            name, label = "test_unknown", row["device_id"]
        iq = burst_to_iq(burst)
        xs, ys, uids = buckets[name]
        for start in row["slice_offsets"]:
            xs.append(iq[:, start:start + slice_len].copy())
            ys.append(label)
            uids.append(row["uid"])

    def pack(name, label_dtype):
        xs, ys, uids = buckets[name]
        if not xs:
            return (np.zeros((0, 2, slice_len)), np.zeros(0, dtype=label_dtype),
                    np.zeros(0, dtype=int))
        return np.stack(xs), np.asarray(ys, dtype=label_dtype), np.asarray(uids, dtype=int)

    tr, va, tk, tu = pack("train", int), pack("val", int), pack("test_known", int), \
        pack("test_unknown", object)
    return Dataset(manifest=manifest, bursts=bursts,
                   train_x=tr[0], train_y=tr[1], train_burst=tr[2],
                   val_x=va[0], val_y=va[1], val_burst=va[2],
                   test_known_x=tk[0], test_known_y=tk[1], test_known_burst=tk[2],
                   test_unknown_x=tu[0], test_unknown_device=tu[1],
                   test_unknown_burst=tu[2])
