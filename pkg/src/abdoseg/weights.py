"""Named weight archives and pre-trained encoder injection.

Archive file layout (binary):

    WARCH1 <entry count>\n
    <name> <rank> <dim0> ... <dimk>\n
    <raw little-endian float32 data, C order>
    ... repeated per entry ...

Entry names may not contain whitespace. Conv weights use the
(out, in, kh, kw) layout.
"""

from __future__ import annotations

import numpy as np
import torch

_MAGIC = "WARCH1"


class ArchiveError(ValueError):
    """A weight archive is malformed or does not match the target network."""


class WeightArchive:
    """Ordered mapping of entry name -> float32 ndarray."""

    def __init__(self, entries: dict[str, np.ndarray] | None = None):
        self.entries: dict[str, np.ndarray] = {}
        for name, arr in (entries or {}).items():
            self.add(name, arr)

    def add(self, name: str, array: np.ndarray) -> None:
        if any(ch.isspace() for ch in name) or not name:
            raise ArchiveError(f"invalid entry name {name!r}")
        self.entries[name] = np.ascontiguousarray(array, dtype=np.float32)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(f"{_MAGIC} {len(self.entries)}\n".encode("ascii"))
            for name, arr in self.entries.items():
                dims = " ".join(str(d) for d in arr.shape)
                f.write(f"{name} {arr.ndim} {dims}".rstrip().encode("ascii") + b"\n")
                f.write(arr.astype("<f4").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "WeightArchive":
        archive = cls()
        with open(path, "rb") as f:
            header = f.readline().decode("ascii", errors="replace").split()
            if len(header) != 2 or header[0] != _MAGIC:
                raise ArchiveError(f"{path}: not a {_MAGIC} archive")
            count = int(header[1])
            for _ in range(count):
                fields = f.readline().decode("ascii", errors="replace").split()
                if len(fields) < 2:
                    raise ArchiveError(f"{path}: truncated entry header")
                name, rank = fields[0], int(fields[1])
                if len(fields) != 2 + rank:
                    raise ArchiveError(f"{path}: entry {name} header/rank mismatch")
                shape = tuple(int(d) for d in fields[2:])
                nbytes = int(np.prod(shape, dtype=np.int64)) * 4
                blob = f.read(nbytes)
                if len(blob) != nbytes:
                    raise ArchiveError(f"{path}: entry {name} data truncated")
                archive.add(name, np.frombuffer(blob, dtype="<f4").reshape(shape))
        return archive

    @classmethod
    def from_state_dict(cls, state: dict) -> "WeightArchive":
        """Snapshot a torch state dict (parameters and buffers) as an archive."""
        archive = cls()
        for name, tensor in state.items():
            archive.add(name, tensor.detach().cpu().numpy().astype(np.float32))
        return archive

    def to_state_dict(self) -> dict[str, torch.Tensor]:
        return {name: torch.from_numpy(arr.copy()) for name, arr in self.entries.items()}


def load_pretrained_encoder(net, archive: WeightArchive) -> int:
    """Replace a generator's backbone conv weights with archive values.

    Decoder weights are untouched. The load is atomic: every expected entry is
    verified for presence and shape before anything is written, so a missing
    or mismatched entry leaves the network unchanged. Returns the number of
    conv layers loaded (weight/bias pairs).

    The first conv may have fewer input channels in the archive than in the
    network (e.g. a cascade stage consuming an extra context channel); the
    surplus input slices are zero-initialized so pre-trained behavior is
    preserved at step zero.
    """
    spec = net.spec
    if spec.encoder not in ("vgg16", "vgg19"):
        raise ArchiveError(f"{spec.encoder} has no pre-trained encoder form")
    names = net.encoder_layer_names()
    staged = []
    for i, name in enumerate(names):
        conv = net.encoder_conv(name)
        for kind in ("weight", "bias"):
            key = f"{name}.{kind}"
            if key not in archive:
                raise ArchiveError(f"archive missing entry {key}; nothing was loaded")
            arr = archive[key]
            want = tuple(getattr(conv, kind).shape)
            if kind == "weight" and i == 0 and arr.shape != want:
                if arr.shape[0] == want[0] and arr.shape[2:] == want[2:] and arr.shape[1] < want[1]:
                    padded = np.zeros(want, dtype=np.float32)
                    padded[:, : arr.shape[1]] = arr
                    arr = padded
                else:
                    raise ArchiveError(
                        f"shape mismatch for {key}: archive {arr.shape} vs network {want}"
                    )
            elif arr.shape != want:
                raise ArchiveError(
                    f"shape mismatch for {key}: archive {arr.shape} vs network {want}"
                )
            staged.append((getattr(conv, kind), arr))
    with torch.no_grad():
        for param, arr in staged:
            param.copy_(torch.from_numpy(arr.copy()))
    return len(names)


# torchvision <model>.features indices of the conv layers, in contracting
# order, for converting published VGG classification weights into archives.
TORCHVISION_CONV_INDICES = {
    "vgg16": [0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28],
    "vgg19": [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34],
}

_BACKBONE_LAYER_NAMES = {
    "vgg16": [
        "enc1.conv1", "enc1.conv2",
        "enc2.conv1", "enc2.conv2",
        "enc3.conv1", "enc3.conv2", "enc3.conv3",
        "enc4.conv1", "enc4.conv2", "enc4.conv3",
        "enc5.conv1", "center.conv1", "center.conv2",
    ],
    "vgg19": [
        "enc1.conv1", "enc1.conv2",
        "enc2.conv1", "enc2.conv2",
        "enc3.conv1", "enc3.conv2", "enc3.conv3", "enc3.conv4",
        "enc4.conv1", "enc4.conv2", "enc4.conv3", "enc4.conv4",
        "enc5.conv1", "center.conv1", "center.conv2", "center.conv3",
    ],
}


def backbone_layer_names(encoder: str) -> list[str]:
    return list(_BACKBONE_LAYER_NAMES[encoder])


def from_torchvision_state_dict(state: dict, encoder: str) -> WeightArchive:
    """Map a torchvision VGG state dict onto this repo's archive naming.

    ``features.<idx>.weight/.bias`` becomes ``enc<g>.conv<i>.weight/.bias``
    following TORCHVISION_CONV_INDICES; classifier entries are ignored.
    """
    if encoder not in TORCHVISION_CONV_INDICES:
        raise ArchiveError(f"no torchvision mapping for encoder {encoder!r}")
    archive = WeightArchive()
    for name, idx in zip(_BACKBONE_LAYER_NAMES[encoder], TORCHVISION_CONV_INDICES[encoder]):
        for kind in ("weight", "bias"):
            key = f"features.{idx}.{kind}"
            if key not in state:
                raise ArchiveError(f"state dict missing {key}")
            tensor = state[key]
            arr = tensor.detach().cpu().numpy() if hasattr(tensor, "detach") else np.asarray(tensor)
            archive.add(f"{name}.{kind}", arr)
    return archive
