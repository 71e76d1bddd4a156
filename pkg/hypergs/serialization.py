import csv
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import numpy as np
import orjson

from .dto import BaseDTO
from .errors import ArtifactError
from .logger import log_extra

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY | orjson.OPT_APPEND_NEWLINE


def default(obj: Any) -> Any:
    if isinstance(obj, BaseDTO):
        return obj.dict()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError


def dumps(content: Any) -> bytes:
    if isinstance(content, bytes):
        return content
    return orjson.dumps(content, option=JSON_OPTIONS, default=default)


def write_bytes(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise ArtifactError(f'cant write {path}: {exc}') from exc
    logger.debug('artifact written', **log_extra(path=str(path), size=len(data)))
    return path


def read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactError(f'cant read {path}: {exc}') from exc


def write_json(path: PathLike, content: Any) -> Path:
    return write_bytes(path, dumps(content))


def read_json(path: PathLike) -> Any:
    data = read_bytes(path)
    try:
        return orjson.loads(data)
    except orjson.JSONDecodeError as exc:
        raise ArtifactError(f'{path} is not valid json: {exc}') from exc


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    """
    Binary P6, 8 bits per channel; image is (height, width, 3) in [0, 1].
    """
    height, width = image.shape[:2]
    return f'P6\n{width} {height}\n255\n'.encode('ascii') + quantize(image).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b'#':
            pos = data.find(b'\n', pos)
            if pos < 0:
                raise ArtifactError('ppm header ends inside a comment')
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if pos == start:
            raise ArtifactError('truncated ppm header')
        tokens.append(data[start:pos])
    if tokens[0] != b'P6' or tokens[3] != b'255':
        raise ArtifactError('only 8-bit binary P6 images are supported')
    if not (tokens[1].isdigit() and tokens[2].isdigit()):
        raise ArtifactError('ppm size is not a number')
    width, height = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data[pos + 1 : pos + 1 + width * height * 3], dtype=np.uint8)
    if pixels.size != width * height * 3:
        raise ArtifactError('truncated ppm payload')
    return pixels.reshape(height, width, 3).astype(np.float64) / 255.0


def write_ppm(path: PathLike, image: np.ndarray) -> Path:
    return write_bytes(path, encode_ppm(image))


def read_ppm(path: PathLike) -> np.ndarray:
    return decode_ppm(read_bytes(path))


def _cell(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: PathLike, fieldnames: Sequence[str], rows: Sequence[Dict[str, Any]]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=list(fieldnames), extrasaction='ignore', lineterminator='\n')
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _cell(v) for k, v in row.items()})
    except OSError as exc:
        raise ArtifactError(f'cant write {path}: {exc}') from exc
    logger.debug('csv written', **log_extra(path=str(path), rows=len(rows)))
    return path


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    try:
        with Path(path).open(newline='') as f:
            return list(csv.DictReader(f))
    except OSError as exc:
        raise ArtifactError(f'cant read {path}: {exc}') from exc
