"""Synthetic paired video + hand-skeleton clips.

Each class is a distinct two-hand motion: the hands translate along a
class-specific direction (visible in video) while the fingers curl at a
class-specific frequency around a class-specific mean curl (visible in the
root-centred skeleton). Video frames
are low-resolution renders of Gaussian blobs at the projected joints; an
occluded frame is blanked in video only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .encoders import JOINTS_PER_HAND, normalize_hand_keypoints

# per-finger segment lengths (wrist->MCP, MCP->PIP, PIP->DIP, DIP->tip), in hand units
_SEGMENTS = np.array([0.40, 0.22, 0.16, 0.12])
_FINGER_ANGLES = np.deg2rad([-65.0, -25.0, 0.0, 22.0, 45.0])
_FINGERTIPS = (4, 8, 12, 16, 20)
HAND_SIZE = 0.11
TRAVEL = 0.3
HAND_GAP = 0.12


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 4
    samples_per_class: int = 16
    frames: int = 8
    height: int = 32
    width: int = 32
    keypoint_noise: float = 0.0
    occlusion_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError(f"occlusion_prob must lie in [0, 1], got {self.occlusion_prob}")
        if self.num_classes < 1 or self.samples_per_class < 1 or self.frames < 1:
            raise ValueError(f"invalid dataset spec {self}")
        if self.keypoint_noise < 0:
            raise ValueError("keypoint_noise must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    frames: np.ndarray  # [N, T, H, W, 3]
    keypoints: np.ndarray  # [N, T, 126], normalised
    labels: np.ndarray  # [N]
    raw_keypoints: np.ndarray  # [N, T, 2, 21, 3]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.frames[idx], self.keypoints[idx], self.labels[idx], self.raw_keypoints[idx])

    def save(self, path) -> None:
        np.savez(path, frames=self.frames, keypoints=self.keypoints, labels=self.labels, raw_keypoints=self.raw_keypoints)

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as z:
            return cls(z["frames"], z["keypoints"], z["labels"], z["raw_keypoints"])


def hand_pose(curl: np.ndarray, mirror: bool) -> np.ndarray:
    """Joint positions ``[..., 21, 3]`` of a hand at the origin for curl in [0, 1].

    Curling bends each finger out of the image plane, so it shortens the
    projected finger and moves the joints in depth.
    """
    curl = np.asarray(curl, dtype=np.float64)
    joints = np.zeros(curl.shape + (JOINTS_PER_HAND, 3))
    sign = -1.0 if mirror else 1.0
    for f, angle in enumerate(_FINGER_ANGLES):
        direction = np.array([sign * np.sin(angle), -np.cos(angle)])
        pos = np.zeros(curl.shape + (3,))
        for j, seg in enumerate(_SEGMENTS):
            bend = curl * 0.55 * j
            step = np.stack([direction[0] * np.cos(bend), direction[1] * np.cos(bend), np.sin(bend)], axis=-1)
            pos = pos + seg * step
            joints[..., 1 + 4 * f + j, :] = pos
    return joints


def _trajectories(spec: SyntheticDatasetSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = spec.num_classes * spec.samples_per_class
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    t = np.arange(spec.frames) / max(spec.frames - 1, 1)
    direction = 2 * np.pi * labels / spec.num_classes + rng.uniform(-0.2, 0.2, size=n)
    frequency = 0.5 + 0.5 * labels  # curl cycles per clip
    phase = rng.uniform(0, 2 * np.pi, size=n)
    centre = rng.uniform(0.4, 0.6, size=(n, 2))
    travel = TRAVEL * rng.uniform(0.85, 1.15, size=n)

    offset = (t[None, :] - 0.5) * travel[:, None]  # [n, T]
    mid = centre[:, None, :] + offset[..., None] * np.stack([np.cos(direction), np.sin(direction)], -1)[:, None, :]
    # the mean curl is a per-frame hand-shape cue, too fine for low-res video
    curl_mean = 0.3 + 0.4 * labels / max(spec.num_classes - 1, 1)
    curl = curl_mean[:, None] + 0.25 * np.sin(2 * np.pi * frequency[:, None] * t[None, :] + phase[:, None])  # [n, T]

    raw = np.zeros((n, spec.frames, 2, JOINTS_PER_HAND, 3))
    for hand, dx in enumerate((-HAND_GAP, HAND_GAP)):
        pose = hand_pose(curl, mirror=hand == 1) * HAND_SIZE
        raw[:, :, hand] = pose
        raw[:, :, hand, :, 0] += mid[..., 0, None] + dx
        raw[:, :, hand, :, 1] += mid[..., 1, None] + 0.1
    return raw, labels


def render_frames(raw: np.ndarray, height: int, width: int, blob_sigma: float = 0.8) -> np.ndarray:
    """Gaussian-blob renders ``[..., T, H, W, 3]`` of keypoints ``[..., T, 2, 21, 3]``.

    Channel 0 draws the first hand, channel 1 the second, channel 2 the fingertips.
    """
    lead = raw.shape[:-3]
    pts = raw.reshape((-1, 2 * JOINTS_PER_HAND, 3))
    xs = pts[..., 0] * width - 0.5
    ys = pts[..., 1] * height - 0.5
    gx = np.exp(-0.5 * ((np.arange(width)[None, None, :] - xs[..., None]) / blob_sigma) ** 2)
    gy = np.exp(-0.5 * ((np.arange(height)[None, None, :] - ys[..., None]) / blob_sigma) ** 2)
    weights = np.zeros((2 * JOINTS_PER_HAND, 3))
    weights[:JOINTS_PER_HAND, 0] = 1.0
    weights[JOINTS_PER_HAND:, 1] = 1.0
    for tip in _FINGERTIPS:
        weights[tip, 2] = weights[JOINTS_PER_HAND + tip, 2] = 1.0
    img = np.einsum("mjh,mjw,jc->mhwc", gy, gx, weights)
    return np.clip(img, 0.0, 1.0).reshape(lead + (height, width, 3))


def generate_synthetic(spec: SyntheticDatasetSpec) -> Dataset:
    """Deterministic in ``spec``; occlusion and keypoint noise draw from their
    own streams, so changing one never perturbs the other modality."""
    traj_ss, noise_ss, occ_ss = np.random.SeedSequence(spec.seed).spawn(3)
    raw, labels = _trajectories(spec, np.random.default_rng(traj_ss))
    frames = render_frames(raw, spec.height, spec.width)
    occluded = np.random.default_rng(occ_ss).random(frames.shape[:2]) < spec.occlusion_prob
    frames[occluded] = 0.0
    noisy = raw + spec.keypoint_noise * np.random.default_rng(noise_ss).standard_normal(raw.shape)
    return Dataset(frames, normalize_hand_keypoints(noisy), labels, noisy)


def train_val_split(n: int, seed: int, val_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint sorted index sets from one seeded shuffle."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n))
    if n_val < 1 or n_val >= n:
        raise ValueError(f"cannot split {n} samples with val_fraction={val_fraction}")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])

