"""Shared latent geometry for the desk-scale world.

Scenes are built by painting a class signature into a low-frequency cosine
pattern on top of a flat radiance field; the synthetic feature provider
projects captured pixels back onto the same pattern basis. The basis is the
contract between the two sides: saturation clipping and sensor noise corrupt
the projection in physically honest ways, which is what gives badly exposed
captures their degraded features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import streams
from .camera import Scene

DEFAULT_SIDE = 32
DEFAULT_DIM = 16
DEFAULT_CONTRAST = 5.0

STREAM_PROTOTYPES = "prototypes"
STREAM_SCENE = "scene"


def _mode_rows(side: int, orders: list[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(side) + 0.5) * np.pi / side
    rows = np.empty((len(orders), side * side), dtype=np.float64)
    parity = np.empty(len(orders), dtype=np.float64)
    for i, (kx, ky) in enumerate(orders):
        mode = np.outer(np.cos(ky * coords), np.cos(kx * coords)).ravel()
        rows[i] = mode / np.linalg.norm(mode)
        parity[i] = -1.0 if kx % 2 else 1.0
    return rows, parity


def _cosine_modes(side: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """First `dim` 2-D DCT-II modes above DC, ordered by spatial frequency.

    Rows are exactly orthonormal and zero-mean on the grid. Flipping the
    image horizontally multiplies mode (kx, ky) by (-1)^kx, so the returned
    parity vector lets callers project flipped images without resampling.
    """
    orders = []
    k = 1
    while len(orders) < dim:
        for kx in range(k + 1):
            for ky in range(k + 1):
                if max(kx, ky) == k and (kx, ky) != (0, 0):
                    orders.append((kx, ky))
        k += 1
    orders.sort(key=lambda p: (p[0] ** 2 + p[1] ** 2, p[0], p[1]))
    return _mode_rows(side, orders[:dim])


def noise_probe_modes(side: int) -> np.ndarray:
    """A handful of high-frequency cosine modes, far above the pattern band.

    White sensor noise puts equal energy in every mode; the smooth class
    pattern and its crop-resample leakage live at low frequencies, so the
    mean squared projection onto these rows estimates the per-pixel noise
    variance alone.
    """
    half = side // 2
    orders = [
        (half - 1, 0), (0, half - 1), (half - 1, half - 1), (half - 2, half // 2),
        (half // 2, half - 2), (half - 1, half // 2 + 1), (half // 2 + 1, half - 1),
        (half - 3, half - 3),
    ]
    rows, _ = _mode_rows(side, orders)
    return rows


@dataclass(frozen=True)
class SignatureSpace:
    """Class prototypes plus the spatial basis that carries signatures into
    pixels. Both sides of the simulator (scene generator, provider) must be
    built from the same space.

    background_dir is a signature-space direction kept as far from every
    prototype as a seeded search allows: the shared texture that fills the
    non-object part of a scene. Views that mostly see background decode to
    the classes nearest this direction, which is what makes low-evidence
    crops consistently (not uniformly) wrong.
    """

    n_classes: int
    dim: int = DEFAULT_DIM
    side: int = DEFAULT_SIDE
    seed: int = 0
    prototypes: np.ndarray = field(init=False, repr=False)
    basis: np.ndarray = field(init=False, repr=False)
    flip_parity: np.ndarray = field(init=False, repr=False)
    background_dir: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.dim < 2:
            raise ValueError("signature dim must be >= 2")
        rng = streams.stream(self.seed, STREAM_PROTOTYPES)
        protos = rng.standard_normal((self.n_classes, self.dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        basis, parity = _cosine_modes(self.side, self.dim)
        cands = rng.standard_normal((2048, self.dim))
        cands /= np.linalg.norm(cands, axis=1, keepdims=True)
        worst = np.abs(cands @ protos.T).max(axis=1)
        background = cands[int(worst.argmin())].copy()
        for arr in (protos, basis, parity, background):
            arr.setflags(write=False)
        object.__setattr__(self, "prototypes", protos)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "flip_parity", parity)
        object.__setattr__(self, "background_dir", background)

    def radiance_from_signature(
        self,
        signature: np.ndarray,
        contrast: float = DEFAULT_CONTRAST,
        window: Optional[np.ndarray] = None,
        background: float = 0.0,
    ) -> np.ndarray:
        """Flat field plus the signature pattern, normalized to mean 1.

        With a window, the class pattern occupies the windowed region and the
        shared background texture fills the rest, so crops can miss the
        object the way real crops do.
        """
        pattern = (np.asarray(signature, dtype=np.float64) @ self.basis).reshape(self.side, self.side)
        if window is not None:
            back = (self.background_dir @ self.basis).reshape(self.side, self.side)
            pattern = window * pattern + background * (1.0 - window) * back
        rad = np.clip(1.0 + contrast * pattern, 0.01, None)
        return rad / rad.mean()

    def object_window(self, rng: np.random.Generator) -> np.ndarray:
        """Smooth object mask: a Gaussian blob at a random position/size.

        Sized so the object dominates a full frame (mean weight ~0.7) while
        edge and corner crops still land mostly on background.
        """
        cx, cy = rng.uniform(0.35, 0.65, size=2) * self.side
        sigma = rng.uniform(0.45, 0.62) * self.side
        coords = np.arange(self.side) + 0.5
        dx = (coords[None, :] - cx) ** 2
        dy = (coords[:, None] - cy) ** 2
        return np.exp(-(dx + dy) / (2.0 * sigma * sigma))


# mean object-window weight over the parameter box above; calibrates the
# provider's expected full-view pattern energy in windowed worlds
WINDOW_SHARE = 0.74


def make_scenes(
    space: SignatureSpace,
    n_scenes: int,
    seed: int,
    concept_noise: float = 0.1,
    contrast: float = DEFAULT_CONTRAST,
    background: float = 0.0,
    start_id: int = 0,
) -> list[Scene]:
    """Procedural scene set: signatures sit near their class prototype
    (concept_noise controls how near).

    background > 0 places the class pattern behind a random smooth object
    window with the shared background texture around it; background == 0
    paints the pattern across the whole frame.
    """
    scenes = []
    for i in range(n_scenes):
        scene_id = start_id + i
        rng = streams.stream(seed, STREAM_SCENE, scene_id)
        label = int(rng.integers(space.n_classes))
        sig = space.prototypes[label].copy()
        if concept_noise > 0:
            sig = sig + concept_noise * rng.standard_normal(space.dim)
        sig /= np.linalg.norm(sig)
        window = space.object_window(rng) if background > 0 else None
        scenes.append(
            Scene(
                scene_id=scene_id,
                true_label=label,
                radiance=space.radiance_from_signature(
                    sig, contrast=contrast, window=window, background=background
                ),
                signature=sig,
            )
        )
    return scenes


def ideal_image(scene: Scene, e_opt: float) -> np.ndarray:
    """The noiseless, perfectly exposed measurement of a scene: what the
    provider's source distribution is anchored to."""
    rad = np.asarray(scene.radiance, dtype=np.float64)
    img = np.exp(e_opt) * rad / rad.mean()
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def save_scenes(path, scenes: list[Scene]) -> None:
    """Scene file: an .npz with radiance maps, labels, signatures, ids."""
    np.savez_compressed(
        path,
        scene_ids=np.array([s.scene_id for s in scenes], dtype=np.int64),
        labels=np.array([s.true_label for s in scenes], dtype=np.int64),
        radiance=np.stack([s.radiance for s in scenes]).astype(np.float32),
        signatures=np.stack([s.signature for s in scenes]),
    )


def load_scenes(path) -> list[Scene]:
    with np.load(path) as data:
        return [
            Scene(
                scene_id=int(sid),
                true_label=int(lab),
                radiance=rad,
                signature=sig,
            )
            for sid, lab, rad, sig in zip(
                data["scene_ids"], data["labels"], data["radiance"], data["signatures"]
            )
        ]
