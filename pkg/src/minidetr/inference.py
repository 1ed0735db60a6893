"""Turning detector outputs into :class:`Detection` lists."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from . import tensor as T
from .metrics import Detection


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def detections_from_arrays(logits: np.ndarray, boxes: np.ndarray, image_id, score_threshold: float = 0.0
                           ) -> list[Detection]:
    """One detection per query: best real class and its probability."""
    probs = _softmax(np.asarray(logits))[:, :-1]
    cls = probs.argmax(axis=1)
    out = []
    for q in range(probs.shape[0]):
        s = float(probs[q, cls[q]])
        if s < score_threshold:
            continue
        box = tuple(float(v) for v in np.clip(boxes[q], 0.0, 1.0))
        out.append(Detection(image_id, int(cls[q]), s, box, q))
    return out


def detections_from_output(output, image_id, score_threshold: float = 0.0) -> list[Detection]:
    return detections_from_arrays(output.class_logits.data, output.boxes.data, image_id, score_threshold)


def predict(model, images: Sequence[np.ndarray], image_ids: Sequence, batch_size: int = 16,
            score_threshold: float = 0.0, workers: int = 1) -> list[Detection]:
    """Batched no-grad inference. Batches may run on ``workers`` threads; the
    result order is always image order."""
    batches = [(images[i:i + batch_size], image_ids[i:i + batch_size]) for i in range(0, len(images), batch_size)]

    def run(batch):
        imgs, ids = batch
        with T.no_grad():
            logits, boxes, _ = model.forward_batch(np.stack(imgs))
        dets = []
        for b, img_id in enumerate(ids):
            dets.extend(detections_from_arrays(logits.data[b], boxes.data[b], img_id, score_threshold))
        return dets

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, batches))
    else:
        parts = [run(b) for b in batches]
    return [d for part in parts for d in part]
