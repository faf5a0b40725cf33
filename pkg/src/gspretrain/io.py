"""Small file formats: PLY point clouds, binary PPM images, PFM depth maps."""
from __future__ import annotations

import numpy as np

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path):
    """Read the x, y, z vertex properties of an ASCII or binary little-endian PLY."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:body_start].decode("ascii").splitlines()

    fmt = None
    n_vertex = 0
    props = []
    in_vertex = False
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise ValueError("list properties on vertices are not supported")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise ValueError(f"{path}: vertex element lacks property {axis!r}")

    if fmt == "ascii":
        rows = data[body_start:].decode("ascii").split("\n")
        values = np.array(
            [[float(v) for v in r.split()[: len(props)]] for r in rows[:n_vertex]],
            dtype=np.float64,
        ).reshape(n_vertex, len(props))
        cols = {name: values[:, i] for i, name in enumerate(names)}
    elif fmt == "binary_little_endian":
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        arr = np.frombuffer(data, dtype=dtype, count=n_vertex, offset=body_start)
        cols = {name: arr[name].astype(np.float64) for name in names}
    else:
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
    return np.stack([cols["x"], cols["y"], cols["z"]], axis=1)


def write_ply(path, points, binary=True):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(points.astype("<f4").tobytes())
        else:
            for p in points.astype(np.float32).tolist():
                fh.write(f"{p[0]!r} {p[1]!r} {p[2]!r}\n".encode("ascii"))


def to_uint8(image):
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image):
    """Write an (H, W, 3) image as binary P6; floats are taken to be in [0, 1]."""
    img = to_uint8(image)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[..., :3]).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    if tokens[0] != "P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    pos += 1
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3).copy()


def write_pfm(path, depth):
    """Greyscale PFM ("Pf"), little-endian, rows stored bottom-to-top."""
    depth = np.asarray(depth, dtype=np.float32)
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.flipud(depth).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        endian = "<" if scale < 0 else ">"
        channels = 3 if kind == b"PF" else 1
        arr = np.frombuffer(fh.read(), dtype=endian + "f4", count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(arr.reshape(shape)).astype(np.float32)

