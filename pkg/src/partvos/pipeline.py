"""Strictly online segmentation loop.

Frame 0 seeds one independent tracker per annotated instance (parts,
segmenter, initial part bank). Every later frame is read once, processed
and emitted before the next frame is touched.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .aggregation import (
    Contribution,
    FrameAggregate,
    InitialPartBank,
    aggregate,
    binarize_frame,
    build_bank,
    nearest_initial,
    resolve_instances,
    similarity_weight,
)
from .config import RunConfig
from .dataset_io import FrameSequence
from .geometry import BoundingBox, connected_components, mask_box
from .metrics import MetricReport, evaluate_sequence
from .part_gen import Part, generate_parts
from .refine import gate_by_object_box, morph_refine
from .roi_segment import SegmenterModel, segment_with_feature, train_segmenter
from .tracking import TrackState, TrackingLost, init_track_state, object_track, ordered_map, to_gray, track_all_parts

__all__ = ["InstanceState", "PipelineResult", "Pipeline", "run_pipeline"]

log = logging.getLogger(__name__)

STAGES = ("init", "track", "segment", "aggregate", "refine", "resolve")


@dataclass
class InstanceState:
    instance_id: int
    parts: list
    model: SegmenterModel
    bank: InitialPartBank
    states: list
    object_box: BoundingBox
    prev_mask: np.ndarray
    lost: bool = False
    lost_at: Optional[int] = None


@dataclass
class PipelineResult:
    masks: list
    timings: list = field(default_factory=list)  # (frame, stage, milliseconds)
    report: Optional[MetricReport] = None
    lost_instances: dict = field(default_factory=dict)  # instance id -> frame index
    object_boxes: dict = field(default_factory=dict)  # instance id -> per-frame boxes

    @property
    def tracking_lost(self) -> bool:
        return bool(self.lost_instances)


class _Timer:
    def __init__(self):
        self.records: list[tuple[int, str, float]] = []
        self._acc: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self._acc[name] = self._acc.get(name, 0.0) + (time.perf_counter() - start) * 1000.0

    def flush(self, frame: int):
        for name in STAGES:
            if name in self._acc:
                self.records.append((frame, name, self._acc[name]))
        self._acc = {}


class Pipeline:
    """Per-frame stages, exposed individually so they can be driven by hand."""

    def __init__(self, config: RunConfig | None = None, executor=None):
        self.config = config or RunConfig()
        self._own_executor = None
        if executor is None and self.config.workers > 1:
            executor = self._own_executor = ThreadPoolExecutor(max_workers=self.config.workers)
        self.executor = executor

    def close(self):
        if self._own_executor is not None:
            self._own_executor.shutdown()
            self._own_executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # ------------------------------------------------------------ set-up

    def init_instance(self, frame0: np.ndarray, mask: np.ndarray, instance_id: int = 1) -> InstanceState:
        cfg = self.config
        seed = [cfg.rng_seed, instance_id]
        parts = generate_parts(mask, cfg, seed + [0])
        model = train_segmenter(frame0, mask, parts, cfg, seed + [1])
        bank = build_bank(frame0, mask, parts, model, cfg.agg.binarize_threshold, cfg.agg.sigma_floor)
        for i, part in enumerate(parts):
            part.feature = bank.features[i]
            part.con_weight = float(bank.confidences[i])
        gray = to_gray(frame0)
        states = [init_track_state(p.id, gray, p.box) for p in parts]
        return InstanceState(instance_id, parts, model, bank, states, mask_box(mask), mask.copy())

    # ------------------------------------------------------- frame stages

    def track(self, inst: InstanceState, frame: np.ndarray) -> None:
        results = track_all_parts(inst.states, frame, self.config, self.executor)
        inst.states = [state for _, _, state in results]
        if not any(s.alive for s in inst.states):
            raise TrackingLost("all parts died on this frame")

    def segment(self, inst: InstanceState, frame: np.ndarray) -> list[Contribution]:
        """Segment every alive part and weight it against the initial bank."""
        threshold = self.config.agg.binarize_threshold
        bank = inst.bank

        def run(state: TrackState):
            prob, local, feat = segment_with_feature(frame, state.box, inst.model, threshold)
            n, d = nearest_initial(feat, bank)
            sim = similarity_weight(d, bank)
            con = float(bank.confidences[n]) if n >= 0 else 0.0
            return state, prob, local, feat, sim, con

        alive = [s for s in inst.states if s.alive]
        out = []
        for state, prob, local, feat, sim, con in ordered_map(run, alive, self.executor):
            part: Part = inst.parts[state.part_id]
            part.box, part.local_mask, part.feature = state.box, local, feat
            part.sim_weight, part.con_weight = sim, con
            out.append(Contribution(state.part_id, state.box, prob, sim * con))
        return out

    def aggregate(self, contributions: Sequence[Contribution], frame_dims) -> FrameAggregate:
        agg_cfg = self.config.agg
        return aggregate(contributions, agg_cfg.mode, frame_dims, agg_cfg.strict_eq5, agg_cfg.binarize_threshold)

    def gate(self, inst: InstanceState, agg: FrameAggregate, proposals: Sequence[BoundingBox] = ()) -> FrameAggregate:
        """Select the object box among proposals and segment components, then attenuate outside it."""
        candidates = list(proposals) + [box for _, box in connected_components(binarize_frame(agg))]
        box, fallback = object_track(inst.object_box, agg.centroid, candidates)
        if fallback:
            log.debug("instance %d: no object box candidate, keeping previous box", inst.instance_id)
        inst.object_box = box
        return gate_by_object_box(agg, box, self.config.refine.alpha)

    # ---------------------------------------------------------- main loop

    def step(self, instances, frame, t, timer, proposals=()) -> np.ndarray:
        dims = frame.shape[:2]
        aggregates = []
        for inst in instances:
            agg = None
            if not inst.lost:
                try:
                    with timer.stage("track"):
                        self.track(inst, frame)
                    with timer.stage("segment"):
                        contributions = self.segment(inst, frame)
                    with timer.stage("aggregate"):
                        agg = self.aggregate(contributions, dims)
                    if agg.empty:
                        agg = None
                    elif self.config.refine.gate:
                        with timer.stage("refine"):
                            agg = self.gate(inst, agg, proposals)
                except TrackingLost:
                    inst.lost, inst.lost_at = True, t
                    log.warning("instance %d: all parts lost at frame %d", inst.instance_id, t)
            if agg is None:
                # keep the last mask for lost instances or frames without contributions
                agg = FrameAggregate(inst.prev_mask.astype(np.float64), (), self.config.agg.binarize_threshold)
            aggregates.append(agg)

        with timer.stage("resolve"):
            labels = resolve_instances(aggregates, self.config.agg.binarize_threshold)
        if self.config.refine.morph:
            with timer.stage("refine"):
                labels = self._morph(labels, [inst.instance_id for inst in instances])
        for k, inst in enumerate(instances, start=1):
            inst.prev_mask = labels == k
        return labels

    def _morph(self, labels, ids):
        out = np.zeros_like(labels)
        for k in range(1, len(ids) + 1):
            refined = morph_refine(labels == k, self.config.refine.radius)
            out[refined & (out == 0)] = k
        return out

    def run(
        self,
        sequence: FrameSequence,
        on_frame: Callable[[int, np.ndarray], None] | None = None,
        proposals: Mapping[int, Sequence[BoundingBox]] | None = None,
        evaluate: bool = True,
    ) -> PipelineResult:
        timer = _Timer()
        first = np.asarray(sequence.annotations[0])
        frame0 = sequence.frame(0)
        ids = [int(k) for k in np.unique(first) if k != 0]
        with timer.stage("init"):
            instances = [self.init_instance(frame0, first == k, k) for k in ids]
        labels0 = np.zeros(first.shape, dtype=np.uint8)
        for idx, k in enumerate(ids, start=1):
            labels0[first == k] = idx
        masks = [labels0]
        if on_frame:
            on_frame(0, labels0)
        timer.flush(0)
        boxes = {inst.instance_id: [inst.object_box] for inst in instances}

        for t in range(1, len(sequence)):
            frame = sequence.frame(t)
            labels = self.step(instances, frame, t, timer, (proposals or {}).get(t, ()))
            out = np.zeros_like(labels)
            for idx, k in enumerate(ids, start=1):
                out[labels == idx] = k
            masks.append(out)
            for inst in instances:
                boxes[inst.instance_id].append(inst.object_box)
            if on_frame:
                on_frame(t, out)
            timer.flush(t)

        result = PipelineResult(masks, timer.records, None, {i.instance_id: i.lost_at for i in instances if i.lost}, boxes)
        if evaluate and any(a is not None for a in sequence.annotations[1:]):
            report = MetricReport()
            report.objects = evaluate_sequence(
                sequence.name, masks, sequence.annotations, self.config.eval.tolerance or None
            )
            result.report = report
        return result


def run_pipeline(
    sequence: FrameSequence,
    config: RunConfig | None = None,
    on_frame: Callable[[int, np.ndarray], None] | None = None,
    proposals: Mapping[int, Sequence[BoundingBox]] | None = None,
) -> PipelineResult:
    """Segment ``sequence`` online; see :class:`Pipeline`."""
    with Pipeline(config) as pipe:
        return pipe.run(sequence, on_frame=on_frame, proposals=proposals)
