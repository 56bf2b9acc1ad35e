"""
This module handles all file formats: extended XYZ clouds and trajectories, JSON lines label
indexes and manifests, CSV logs and metric tables, the parameter checkpoint and the dataset
directory layout.
"""

import csv
import json
import re
import unicodedata
from pathlib import Path

import numpy as np

from errors import CheckpointMismatchError, InvalidRangeError
from molsys import AtomCountPrior, ComplexRecord, Labels, MoleculeCloud, PocketCloud, encode_symbols
from net import NetConfig, ParameterSet

CHECKPOINT_FORMAT = "glide-params/1"
LABELS_FILE = "labels.jsonl"
PRIOR_FILE = "atom_prior.json"
SPLITS = ("train", "test")


def normalize_key(key):
    """
    Normalizes a metadata key.

    Parameters
    ----------
    key : str
        Raw key, which may contain accents, spaces or punctuation.

    Returns
    -------
    str
        An ASCII-only, lowercase identifier using underscores, or 'key' if nothing is left.
    """

    if key is None:
        return ""
    key = unicodedata.normalize("NFKD", str(key).strip())
    key = "".join(ch for ch in key if not unicodedata.combining(ch))
    # keep alnum only, collapse to underscores
    key = re.sub(r"[^a-zA-Z0-9]+", "_", key)
    key = re.sub(r"_+", "_", key).strip("_").lower()
    return key or "key"


def _format_value(value):
    text = str(value)
    if re.search(r"[\s=\"]", text):
        raise InvalidRangeError(f"metadata value {text!r} may not contain spaces, quotes or '='")
    return text


def format_xyz(symbols, x, meta=None):
    """
    One extended XYZ frame: atom count, key=value metadata, then `El x y z` rows with 6 decimals.

    Parameters
    ----------
    symbols : list of str
    x : np.ndarray
        N x 3 coordinates in Angstrom.
    meta : dict or None
        Metadata such as id, source and t.

    Returns
    -------
    str
    """

    meta = meta or {}
    lines = [str(len(symbols)), " ".join(f"{normalize_key(k)}={_format_value(v)}" for k, v in meta.items())]
    for symbol, (a, b, c) in zip(symbols, np.asarray(x, dtype=np.float64)):
        lines.append(f"{symbol} {a:.6f} {b:.6f} {c:.6f}")
    return "\n".join(lines) + "\n"


def parse_xyz(text):
    """
    Parse all frames of an extended XYZ text.

    Returns
    -------
    list of tuple
        (symbols, N x 3 array, metadata dict) per frame.
    """

    lines = text.splitlines()
    frames = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            n = int(lines[i].strip())
        except ValueError:
            raise InvalidRangeError(f"line {i + 1}: expected an atom count, got {lines[i]!r}") from None
        if i + 2 + n > len(lines):
            raise InvalidRangeError(f"frame starting at line {i + 1} is truncated")
        meta = dict(item.split("=", 1) for item in lines[i + 1].split() if "=" in item)
        symbols, coords = [], []
        for row in lines[i + 2:i + 2 + n]:
            parts = row.split()
            if len(parts) != 4:
                raise InvalidRangeError(f"malformed atom row {row!r}")
            symbols.append(parts[0])
            coords.append([float(v) for v in parts[1:]])
        frames.append((symbols, np.array(coords, dtype=np.float64).reshape(n, 3), meta))
        i += 2 + n
    return frames


def write_xyz(path, cloud, meta=None):
    Path(path).write_text(format_xyz(cloud.symbols, cloud.x, meta))


def write_trajectory(path, frames):
    """Write (symbols, x, meta) frames as one multi-frame file."""

    Path(path).write_text("".join(format_xyz(s, x, m) for s, x, m in frames))


def read_frames(path):
    return parse_xyz(Path(path).read_text())


def read_molecule(path, elements):
    symbols, x, meta = read_frames(path)[0]
    return MoleculeCloud.from_symbols(symbols, x, elements), meta


def read_pocket(path, elements):
    symbols, x, meta = read_frames(path)[0]
    return PocketCloud(x, encode_symbols(symbols, elements).reshape(len(symbols), len(elements)), elements), meta


def write_jsonl(path, rows):
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def write_csv(path, rows, fieldnames):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fieldnames})


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_train_log(path, log):
    write_csv(path, [row._asdict() for row in log], ["epoch", "split", "loss", "lr"])


def save_split(split_dir, records):
    """
    Write records as <id>_pocket.xyz / <id>_ligand.xyz plus the labels.jsonl index.

    Parameters
    ----------
    split_dir : Path or str
    records : list of ComplexRecord
    """

    split_dir = Path(split_dir)
    split_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for record in records:
        pocket_file = f"{record.record_id}_pocket.xyz"
        ligand_file = f"{record.record_id}_ligand.xyz"
        write_xyz(split_dir / pocket_file, record.pocket, {"id": record.record_id, "source": "pocket"})
        write_xyz(split_dir / ligand_file, record.ligand, {"id": record.record_id, "source": "ligand"})
        index.append({
            "id": record.record_id,
            "pocket": pocket_file,
            "ligand": ligand_file,
            "deltaG": record.labels.deltaG,
            "qed": record.labels.qed,
            "sa": record.labels.sa,
        })
    write_jsonl(split_dir / LABELS_FILE, index)


def load_split(split_dir, elements):
    """
    Read a split written by save_split.

    Raises
    ------
    FileNotFoundError
        If the label index or a referenced file is missing.
    """

    split_dir = Path(split_dir)
    records = []
    for row in read_jsonl(split_dir / LABELS_FILE):
        pocket, _ = read_pocket(split_dir / row["pocket"], elements)
        ligand, _ = read_molecule(split_dir / row["ligand"], elements)
        records.append(ComplexRecord(row["id"], pocket, ligand, Labels(row["deltaG"], row["qed"], row["sa"])))
    return records


def save_prior(path, prior):
    Path(path).write_text(prior.to_json())


def load_prior(path):
    return AtomCountPrior.from_json(Path(path).read_text())


def save_checkpoint(path, params):
    """
    Write a checkpoint: a JSON header line (format, config echo, layout, size, content hash)
    followed by the parameters as little-endian float64.
    """

    header = {
        "format": CHECKPOINT_FORMAT,
        "config": params.config.model_dump(mode="json"),
        "layout": [[name, list(shape)] for name, shape in params.layout],
        "n": int(params.flat.shape[0]),
        "sha256": params.content_hash,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path, role=None, num_types=None, expected=None):
    """
    Read a checkpoint and verify it.

    Parameters
    ----------
    path : Path or str
    role : str or None
        Expected network role.
    num_types : int or None
        Expected element vocabulary size.
    expected : NetConfig or None
        Architecture of the run config; every field must match the stored config echo.

    Returns
    -------
    ParameterSet

    Raises
    ------
    CheckpointMismatchError
        If the format, layout, size, hash, role, vocabulary or architecture does not match.
    """

    data = Path(path).read_bytes()
    head, sep, body = data.partition(b"\n")
    try:
        header = json.loads(head)
    except ValueError:
        raise CheckpointMismatchError(f"{path}: unreadable checkpoint header") from None
    if not sep or header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatchError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if len(body) != 8 * header["n"]:
        raise CheckpointMismatchError(f"{path}: expected {header['n']} parameters, found {len(body) // 8}")
    try:
        config = NetConfig(**header["config"])
        params = ParameterSet(config, np.frombuffer(body, dtype="<f8").astype(np.float64))
    except ValueError as e:
        raise CheckpointMismatchError(f"{path}: {e}") from None
    layout = [[name, list(shape)] for name, shape in params.layout]
    if layout != header["layout"]:
        raise CheckpointMismatchError(f"{path}: parameter layout differs from the config")
    if params.content_hash != header["sha256"]:
        raise CheckpointMismatchError(f"{path}: content hash mismatch")
    if role is not None and config.role != role:
        raise CheckpointMismatchError(f"{path}: expected a {role}, found a {config.role}")
    if num_types is not None and config.num_types != num_types:
        raise CheckpointMismatchError(f"{path}: trained on {config.num_types} element types, run uses {num_types}")
    if expected is not None:
        stored, wanted = config.model_dump(), expected.model_dump()
        differing = [f"{key} {stored[key]} != {wanted[key]}" for key in wanted if stored[key] != wanted[key]]
        if differing:
            raise CheckpointMismatchError(f"{path}: differs from the run config in " + ", ".join(differing))
    return params
