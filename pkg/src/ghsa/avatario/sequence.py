"""JSON-lines frame sequences.

One JSON object per line, in frame order::

    {"index": 0, "timestamp": 0.0,
     "theta": [...], "psi": [...],          # pose axis-angles, expression
     "cam": {"R": [9 floats, row-major], "t": [3], "fx", "fy", "cx", "cy",
             "width", "height"},
     "ldmk": [[x, y] x 4],                  # neck, l/r shoulder, nose (null = missing)
     "image": "frames/0000.png",            # optional, relative to the file
     "head_mask": "frames/0000_head.png",   # optional
     "fg_mask": "frames/0000_fg.png"}       # optional

Indices must increase strictly. Images may be PNG or PFM (by extension).
"""

import json
import math
import os

import numpy as np

from ..errors import InvalidArgument
from ..gaussmodel import Camera
from ..renderer import read_pfm, read_png, write_pfm, write_png
from ..rig import FrameParams

IMAGE_KEYS = ("image", "head_mask", "fg_mask")


def _read_image(path):
    return read_pfm(path) if path.lower().endswith(".pfm") else read_png(path)


def _write_image(path, img):
    (write_pfm if path.lower().endswith(".pfm") else write_png)(path, img)


def frame_to_record(frame):
    ldmk = [[None if not math.isfinite(v) else float(v) for v in row] for row in frame.ldmk]
    return {"index": int(frame.index), "timestamp": float(frame.timestamp),
            "theta": [float(v) for v in frame.theta], "psi": [float(v) for v in frame.psi],
            "cam": frame.cam.to_dict(), "ldmk": ldmk}


def record_to_frame(rec):
    ldmk = np.array([[np.nan if v is None else v for v in row] for row in rec["ldmk"]], float)
    return FrameParams(np.array(rec["theta"], float), np.array(rec["psi"], float),
                       Camera.from_dict(rec["cam"]), ldmk, index=int(rec["index"]),
                       timestamp=float(rec.get("timestamp", 0.0)))


def save_sequence(path, frames, image_format="png", write_images=True):
    """Write ``frames`` as JSON lines; images go to ``<stem>_frames/``."""
    base = os.path.dirname(os.path.abspath(path))
    stem = os.path.splitext(os.path.basename(path))[0]
    img_dir = stem + "_frames"
    with open(path, "w") as fh:
        for fr in frames:
            rec = frame_to_record(fr)
            if write_images:
                for key in IMAGE_KEYS:
                    img = fr.image if key == "image" else (
                        fr.head_mask if key == "head_mask" else fr.extra.get(key))
                    if img is None:
                        continue
                    os.makedirs(os.path.join(base, img_dir), exist_ok=True)
                    rel = f"{img_dir}/{fr.index:05d}_{key}.{image_format}"
                    _write_image(os.path.join(base, rel), img)
                    rec[key] = rel
            fh.write(json.dumps(rec) + "\n")


def load_sequence(path, load_images=True):
    """Read a JSON-lines sequence into a list of :class:`FrameParams`."""
    base = os.path.dirname(os.path.abspath(path))
    frames = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                fr = record_to_frame(rec)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InvalidArgument(f"{path}:{lineno}: bad frame record ({exc})") from None
            if frames and fr.index <= frames[-1].index:
                raise InvalidArgument(f"{path}:{lineno}: frame indices must increase")
            if load_images:
                for key in IMAGE_KEYS:
                    if rec.get(key):
                        img = _read_image(os.path.join(base, rec[key]))
                        if key == "image":
                            fr.image = img[..., :3].astype(np.float32)
                        else:
                            img = img if img.ndim == 2 else img[..., 0]
                            if key == "head_mask":
                                fr.head_mask = img.astype(np.float32)
                            else:
                                fr.extra[key] = img.astype(np.float32)
            frames.append(fr)
    return frames
