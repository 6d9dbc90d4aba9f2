"""Convert the 5000-digit MNIST sample shipped in the mlxtend wheel to gzipped IDX.

usage: python tools/build_mnist_fixture.py mlxtend-0.24.0-py3-none-any.whl data/
"""
import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from wnbias.datasets import encode_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main(wheel: str, out_dir: str) -> None:
    raw = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER))
    table = np.loadtxt(io.StringIO(raw.decode()), delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in (("images-idx3-ubyte", images), ("labels-idx1-ubyte", labels)):
        path = out / f"mnist5k-{name}.gz"
        with open(path, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
            gz.write(encode_idx(arr))
        print(path, arr.shape)


if __name__ == "__main__":
    main(*sys.argv[1:3])
