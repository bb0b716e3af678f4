"""Event-sourced state machine for the four-stage annotation protocol.

Stage I trains candidate models on the seed mask repository and selects
a champion by DSC. Stage II reviews 500-sample batches of champion
proposals (accept / reject / unsure / exclude), growing the mask
repository and retraining each round. Stage III trains six networks and
lets reviewers pick the best proposal per item (or deny, which re-routes
the item once through the Stage II style manual flow). Stage IV samples
20% for MD verification; the verified set doubles as the held-out test
split.

Every mutation is an appended event; replaying the log reproduces the
exact state. Masks travel as opaque refs; pixel data lives elsewhere.
"""

from __future__ import annotations

import datetime as _dt
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, StateError, UsageError

STAGES = ("I", "II", "III", "IV")
DECISIONS = ("accept", "reject", "unsure", "exclude")
TERMINAL = frozenset({"accepted", "modified", "excluded", "verified"})
STATUSES = (
    "pending",
    "accepted",
    "rejected_pending_edit",
    "modified",
    "unsure_pending_md",
    "excluded",
    "denied",
    "verified",
)


@dataclass
class ReviewItem:
    id: str
    cls: str
    image_ref: str = ""
    mask_ref: str = ""
    proposals: tuple = ()
    status: str = "pending"
    round_index: int = 0
    reviewer: str = ""
    md_note: str = ""
    decided_at: str = ""
    rerouted: bool = False
    verification_pending: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["proposals"] = list(self.proposals)
        return d


@dataclass
class WorkflowState:
    seed: int = 0
    stage: str = "I"
    items: Dict[str, ReviewItem] = field(default_factory=dict)
    classes: Dict[str, str] = field(default_factory=dict)
    image_refs: Dict[str, str] = field(default_factory=dict)
    pool: List[str] = field(default_factory=list)
    current_batch: List[str] = field(default_factory=list)
    round: int = 0
    repository: set = field(default_factory=set)
    stage1_models: List[str] = field(default_factory=list)
    stage3_models: List[str] = field(default_factory=list)
    champion: Optional[str] = None
    tallies: Dict[str, int] = field(default_factory=dict)
    denied_queue: List[str] = field(default_factory=list)
    stage4_sampled: set = field(default_factory=set)
    applied: int = 0  # count of applied events; next seq must be applied + 1

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "stage": self.stage,
            "items": {k: self.items[k].to_dict() for k in sorted(self.items)},
            "classes": dict(sorted(self.classes.items())),
            "image_refs": dict(sorted(self.image_refs.items())),
            "pool": list(self.pool),
            "current_batch": list(self.current_batch),
            "round": self.round,
            "repository": sorted(self.repository),
            "stage1_models": list(self.stage1_models),
            "stage3_models": list(self.stage3_models),
            "champion": self.champion,
            "tallies": dict(sorted(self.tallies.items())),
            "denied_queue": list(self.denied_queue),
            "stage4_sampled": sorted(self.stage4_sampled),
            "applied": self.applied,
        }

    def status_counts(self) -> Dict[str, int]:
        counts = {status: 0 for status in STATUSES}
        for item in self.items.values():
            counts[item.status] += 1
        return counts


def _require(condition: bool, message: str, exc=StateError) -> None:
    if not condition:
        raise exc(message)


def _get_item(state: WorkflowState, item_id: str) -> ReviewItem:
    item = state.items.get(item_id)
    if item is None:
        raise UsageError(f"unknown item {item_id!r}")
    return item


def _insert_repository(state: WorkflowState, item_id: str) -> None:
    state.repository.add(item_id)
    if item_id in state.pool:
        state.pool.remove(item_id)


def _reviewable(state: WorkflowState, item: ReviewItem) -> bool:
    if state.stage == "II":
        return True
    return state.stage == "III" and item.rerouted


def apply_event(state: WorkflowState, event: Mapping) -> None:
    """Apply one event in place. Deterministic; raises on invalid input."""
    seq, etype, p = event["seq"], event["type"], event["payload"]
    _require(seq == state.applied + 1, f"event seq {seq} breaks monotone order", UsageError)
    handler = _HANDLERS.get(etype)
    if handler is None:
        raise UsageError(f"unknown event type {etype!r}")
    handler(state, p, event)
    state.applied = seq


def _ev_init(state: WorkflowState, p: Mapping, event: Mapping) -> None:
    _require(state.applied == 0, "init must be the first event")
    state.seed = int(p["seed"])
    state.classes = dict(p["classes"])
    state.image_refs = dict(p.get("image_refs", {}))
    pool = list(p["stage2_pool"])
    unknown = [i for i in pool if i not in state.classes]
    _require(not unknown, f"stage2 pool ids not registered: {unknown}", ConfigurationError)
    state.pool = pool


def _ev_register_models(state: WorkflowState, p: Mapping, event: Mapping) -> None:
    models = list(p["model_ids"])
    if int(p["stage"]) == 1:
        _require(state.stage == "I", "stage 1 models register in stage I")
        _require(len(models) >= 2, "stage I needs at least 2 candidate models", UsageError)
        state.stage1_models = models
    else:
        _require(state.stage == "III", "stage 3 models register in stage III")
        _require(len(models) == 6, "stage III requires exactly 6 models", ConfigurationError)
        state.stage3_models = models
        state.tallies = {m: 0 for m in models}


def _ev_stage1_select(state: WorkflowState, p: Mapping, event: Mapping) -> None:
    _require(state.stage == "I", "stage1_select only valid in stage I")
    scores = dict(p["scores"])
    _require(bool(scores), "no candidates to select from", UsageError)
    _require(
        set(scores) == set(state.stage1_models),
        "scores must cover exactly the registered stage I candidates",
        UsageError,
    )
    best = max(state.stage1_models, key=lambda m: (scores[m], -state.stage1_models.index(m)))
    state.champion = best


def _ev_advance_stage(state: WorkflowState, p: Mapping, event: Mapping) -> None:
    to = p["to"]
    _require(to in STAGES, f"unknown stage {to!r}", UsageError)
    idx, target = STAGES.index(state.stage), STAGES.index(to)
    _require(target == idx + 1, f"cannot advance {state.stage} -> {to}")
    if to == "II":
        _require(state.champion is not None, "stage II needs a selected champion")
    elif to == "III":
        _require(not state.pool, "stage II pool is not exhausted")
        _require(not state.current_batch, "current round is not finalized")
    else:
        unfinished = [
            i
            for i in state.classes
            if i not in state.items or state.items[i].status not in TERMINAL
        ]
        _require(
            not unfinished,
            f"{len(unfinished)} items lack a terminal decision (e.g. {sorted(unfinished)[:3]})",
        )
        _require(not state.denied_queue, "denied items await re-routing")
    state.stage = to


def _ev_next_batch(state: WorkflowState, p: Mapping, event: Mapping) -> None:
    _require(state.stage == "II", "next_batch only valid in stage II")
    _require(not state.current_batch, "previous round is not finalized")
    ids = list(p["item_ids"])
    refs = dict(p["mask_refs"])
    for item_id in ids:
        _require(item_id in state.pool, f"item {item_id!r} not in the pending pool", UsageError)
        state.items[item_id] = ReviewItem(
            id=item_id,
            cls=state.classes[item_id],
            image_ref=state.image_refs.get(item_id, ""),
            mask_ref=refs.get(item_id, ""),
            status="pending",
            round_index=state.round,
        )
        state.pool.remove(item_id)
    state.current_batch = ids


def _ev_decision(state: WorkflowState, p: Mapping, event: Mapping) -> None:
    item = _get_item(state, p["item_id"])
    decision = p["decision"]
    _require(decision in DECISIONS, f"unknown decision {decision!r}", UsageError)
    _require(item.status not in TERMINAL, f"item {item.id} already terminal: {item.status}")
    _require(item.status == "pending", f"item {item.id} is {item.status}, not pending")
    _require(_reviewable(state, item), f"decisions not allowed in stage {state.stage}")
    item.reviewer = p.get("reviewer", "")
    item.decided_at = event["ts"]
    mask_ref = p.get("mask_ref")
    if decision == "accept":
        item.status = "accepted"
        _insert_repository(state, item.id)
    elif decision == "reject":
        if mask_ref:
            item.mask_ref = mask_ref
            item.status = "modified"
            _insert_repository(state, item.id)
        else:
            item.status = "rejected_pending_edit"
    elif decision == "unsure":
        item.status = "unsure_pending_md"
        item.md_note = p.get("note", "")
    else:
        item.status = "excluded"


def _ev_edit(state: WorkflowState, p: Mapping, event: Mapping) -> None:
    item = _get_item(state, p["item_id"])
    _require(
        item.status == "rejected_pending_edit",
        f"item {item.id} is {item.status}; edits require rejected_pending_edit",
    )
    _require(_reviewable(state, item), f"edits not allowed in stage {state.stage}")
    _require(bool(p.get("mask_ref")), "an edited mask is required", UsageError)
    item.mask_ref = p["mask_ref"]
    item.reviewer = p.get("reviewer", item.reviewer)
    item.decided_at = event["ts"]
    item.status = "modified"
    _insert_repository(state, item.id)


def _ev_md_resolve(state: WorkflowState, p: Mapping, event: Mapping) -> None:
    item = _get_item(state, p["item_id"])
    _require(
        item.status == "unsure_pending_md",
        f"item {item.id} is {item.status}; md_resolve requires unsure_pending_md",
    )
    _require(bool(p.get("mask_ref")), "an adjusted mask is required", UsageError)
    item.md_note = p.get("note", "")
    item.mask_ref = p["mask_ref"]
    item.reviewer = p.get("reviewer", item.reviewer)
    item.decided_at = event["ts"]
    item.status = "modified"
    _insert_repository(state, item.id)


def _ev_finalize_round(state: WorkflowState, p: Mapping, event: Mapping) -> None:
    _require(state.stage == "II", "finalize_round only valid in stage II")
    open_items = [i for i in state.current_batch if state.items[i].status not in TERMINAL]
    _require(not open_items, f"round has non-terminal items: {open_items}")
    state.current_batch = []
    state.round += 1


def _ev_stage3_propose(state: WorkflowState, p: Mapping, event: Mapping) -> None:
    _require(state.stage == "III", "stage3_propose only valid in stage III")
    _require(
        len(state.stage3_models) == 6,
        "six stage III models must be registered first",
        ConfigurationError,
    )
    proposals = dict(p["proposals"])
    for item_id, refs in proposals.items():
        _require(item_id not in state.items, f"item {item_id!r} already under review", UsageError)
        _require(
            item_id in state.classes,
            f"item {item_id!r} was never registered",
            UsageError,
        )
        _require(len(refs) == 6, f"item {item_id!r} needs 6 proposals", ConfigurationError)
        state.items[item_id] = ReviewItem(
            id=item_id,
            cls=state.classes[item_id],
            image_ref=state.image_refs.get(item_id, ""),
            proposals=tuple(refs),
            status="pending",
            round_index=state.round,
        )


def _ev_stage3_select(state: WorkflowState, p: Mapping, event: Mapping) -> None:
    _require(state.stage == "III", "stage3_select only valid in stage III")
    item = _get_item(state, p["item_id"])
    _require(bool(item.proposals), f"item {item.id} carries no proposals")
    _require(item.status == "pending", f"item {item.id} is {item.status}, not pending")
    choice = p["choice"]
    item.reviewer = p.get("reviewer", "")
    item.decided_at = event["ts"]
    if choice == "deny":
        item.status = "denied"
        state.denied_queue.append(item.id)
        return
    index = int(choice)
    if not 1 <= index <= 6:
        raise UsageError(f"choice must be 1-6 or 'deny', got {choice!r}")
    model_id = state.stage3_models[index - 1]
    item.mask_ref = item.proposals[index - 1]
    item.status = "accepted"
    state.tallies[model_id] = state.tallies.get(model_id, 0) + 1
    _insert_repository(state, item.id)


def _ev_reroute_denied(state: WorkflowState, p: Mapping, event: Mapping) -> None:
    _require(state.stage == "III", "reroute_denied only valid in stage III")
    refs = dict(p["mask_refs"])
    for item_id, ref in refs.items():
        item = _get_item(state, item_id)
        _require(item.status == "denied", f"item {item_id} is {item.status}, not denied")
        _require(not item.rerouted, f"item {item_id} was already re-routed once")
        item.status = "pending"
        item.mask_ref = ref
        item.proposals = ()
        item.rerouted = True
        state.denied_queue.remove(item_id)


def _ev_stage4_sample(state: WorkflowState, p: Mapping, event: Mapping) -> None:
    _require(state.stage == "IV", "stage4_sample only valid in stage IV")
    for item_id in p["sampled_ids"]:
        item = _get_item(state, item_id)
        _require(item.id in state.repository, f"item {item_id} is not in the repository")
        item.verification_pending = True
        state.stage4_sampled.add(item_id)


def _ev_md_verify(state: WorkflowState, p: Mapping, event: Mapping) -> None:
    _require(state.stage == "IV", "md_verify only valid in stage IV")
    item = _get_item(state, p["item_id"])
    _require(item.verification_pending, f"item {item.id} was not sampled for verification")
    _require(
        item.status in ("accepted", "modified"),
        f"item {item.id} is {item.status}; only repository items verify",
    )
    item.status = "verified"
    item.verification_pending = False
    item.reviewer = p.get("reviewer", item.reviewer)
    item.decided_at = event["ts"]


_HANDLERS: Dict[str, Callable] = {
    "init": _ev_init,
    "register_models": _ev_register_models,
    "stage1_select": _ev_stage1_select,
    "advance_stage": _ev_advance_stage,
    "next_batch": _ev_next_batch,
    "decision": _ev_decision,
    "edit": _ev_edit,
    "md_resolve": _ev_md_resolve,
    "finalize_round": _ev_finalize_round,
    "stage3_propose": _ev_stage3_propose,
    "stage3_select": _ev_stage3_select,
    "reroute_denied": _ev_reroute_denied,
    "stage4_sample": _ev_stage4_sample,
    "md_verify": _ev_md_verify,
}


class WorkflowEngine:
    """Applies operations as appended events, optionally persisted as JSONL."""

    def __init__(self, log_path=None):
        self.state = WorkflowState()
        self.events: List[dict] = []
        self.log_path = Path(log_path) if log_path else None

    @classmethod
    def from_log(cls, log_path) -> "WorkflowEngine":
        engine = cls(log_path=None)
        with open(log_path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    event = json.loads(line)
                    apply_event(engine.state, event)
                    engine.events.append(event)
        engine.log_path = Path(log_path)
        return engine

    @classmethod
    def replay(cls, events: Sequence[Mapping]) -> "WorkflowEngine":
        engine = cls()
        for event in events:
            apply_event(engine.state, event)
            engine.events.append(dict(event))
        return engine

    def _emit(self, etype: str, payload: dict, ts: Optional[str] = None) -> dict:
        event = {
            "seq": self.state.applied + 1,
            "ts": ts or _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "type": etype,
            "payload": payload,
        }
        apply_event(self.state, event)
        self.events.append(event)
        if self.log_path:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(event, sort_keys=True) + "\n")
        return event

    # -- stage I ------------------------------------------------------------

    def init(
        self,
        classes: Mapping[str, str],
        stage2_pool: Sequence[str],
        seed: int = 0,
        image_refs: Optional[Mapping[str, str]] = None,
    ) -> None:
        payload = {"classes": dict(classes), "stage2_pool": list(stage2_pool), "seed": seed}
        if image_refs:
            payload["image_refs"] = dict(image_refs)
        self._emit("init", payload)

    def register_models(self, stage: int, model_ids: Sequence[str]) -> None:
        self._emit("register_models", {"stage": stage, "model_ids": list(model_ids)})

    def stage1_select(self, scores: Mapping[str, float]) -> str:
        """Champion = argmax mean DSC; ties break to the lower registry index."""
        self._emit("stage1_select", {"scores": dict(scores)})
        return self.state.champion

    def advance_stage(self, to: str) -> None:
        self._emit("advance_stage", {"to": to})

    # -- stage II -----------------------------------------------------------

    def next_batch(self, batch_size: int = 500, mask_refs=None) -> List[str]:
        """Seeded deterministic sample from the pending pool.

        Empty pool yields an empty batch (stage completion signal).
        ``mask_refs`` maps item id to the freshly inferred mask ref; a
        callable receives each id; None falls back to a champion ref.
        """
        _require(self.state.stage == "II", "next_batch only valid in stage II")
        pool = sorted(self.state.pool)
        if not pool:
            return []
        rng = np.random.default_rng([self.state.seed, self.state.round])
        take = min(batch_size, len(pool))
        ids = [pool[i] for i in rng.choice(len(pool), size=take, replace=False)]
        if mask_refs is None:
            refs = {i: f"infer/{self.state.champion}/round{self.state.round}/{i}" for i in ids}
        elif callable(mask_refs):
            refs = {i: mask_refs(i) for i in ids}
        else:
            refs = {i: mask_refs[i] for i in ids}
        self._emit("next_batch", {"item_ids": ids, "mask_refs": refs})
        return ids

    def submit_decision(
        self,
        item_id: str,
        decision: str,
        reviewer: str,
        edited_mask_ref: Optional[str] = None,
        note: str = "",
        ts: Optional[str] = None,
    ) -> ReviewItem:
        payload = {"item_id": item_id, "decision": decision, "reviewer": reviewer}
        if edited_mask_ref:
            _require(decision == "reject", "an edited mask only accompanies a reject", UsageError)
            payload["mask_ref"] = edited_mask_ref
        if note:
            payload["note"] = note
        self._emit("decision", payload, ts=ts)
        return self.state.items[item_id]

    def submit_edit(self, item_id: str, mask_ref: str, reviewer: str, ts=None) -> ReviewItem:
        self._emit("edit", {"item_id": item_id, "mask_ref": mask_ref, "reviewer": reviewer}, ts=ts)
        return self.state.items[item_id]

    def md_resolve(self, item_id: str, md_note: str, mask_ref: str, reviewer: str = "", ts=None) -> ReviewItem:
        self._emit(
            "md_resolve",
            {"item_id": item_id, "note": md_note, "mask_ref": mask_ref, "reviewer": reviewer},
            ts=ts,
        )
        return self.state.items[item_id]

    def finalize_round(self) -> dict:
        """Close the round; returns the retrain job descriptor."""
        self._emit("finalize_round", {})
        return {
            "round": self.state.round,
            "dataset_size": len(self.state.repository),
            "champion": self.state.champion,
        }

    # -- stage III ----------------------------------------------------------

    def stage3_propose(self, proposals: Mapping[str, Sequence[str]]) -> None:
        self._emit(
            "stage3_propose",
            {"proposals": {k: list(v) for k, v in proposals.items()}},
        )

    def stage3_select(self, item_id: str, choice, reviewer: str = "", ts=None) -> ReviewItem:
        self._emit(
            "stage3_select",
            {"item_id": item_id, "choice": choice, "reviewer": reviewer},
            ts=ts,
        )
        return self.state.items[item_id]

    def stage3_champion(self) -> str:
        """Most-selected stage III model; ties break to the lower registry index."""
        tallies = self.state.tallies
        _require(any(tallies.values()), "no stage III selections recorded", UsageError)
        models = self.state.stage3_models
        return max(models, key=lambda m: (tallies.get(m, 0), -models.index(m)))

    def reroute_denied(self, mask_refs: Mapping[str, str]) -> None:
        self._emit("reroute_denied", {"mask_refs": dict(mask_refs)})

    # -- stage IV -----------------------------------------------------------

    def stage4_sample(self, fraction: float = 0.2, seed: Optional[int] = None) -> List[str]:
        """Stratified-by-class seeded sample of the repository for MD review."""
        _require(self.state.stage == "IV", "stage4_sample only valid in stage IV")
        all_ids = set(self.state.classes)
        annotated = {
            i for i, item in self.state.items.items() if item.status in TERMINAL
        }
        missing = all_ids - annotated
        _require(
            not missing,
            f"repository incomplete: {len(missing)} items lack a terminal decision",
        )
        rng = np.random.default_rng(self.state.seed if seed is None else seed)
        by_class: Dict[str, List[str]] = {}
        for item_id in sorted(self.state.repository):
            by_class.setdefault(self.state.classes[item_id], []).append(item_id)
        sampled: List[str] = []
        for cls in sorted(by_class):
            ids = by_class[cls]
            take = round(fraction * len(ids))
            chosen = rng.choice(len(ids), size=take, replace=False)
            sampled.extend(ids[i] for i in sorted(chosen))
        self._emit("stage4_sample", {"fraction": fraction, "sampled_ids": sampled})
        return sampled

    def md_verify(self, item_id: str, reviewer: str = "", ts=None) -> ReviewItem:
        self._emit("md_verify", {"item_id": item_id, "reviewer": reviewer}, ts=ts)
        return self.state.items[item_id]

    # -- queries ------------------------------------------------------------

    def progress(self) -> dict:
        state = self.state
        return {
            "stage": state.stage,
            "round": state.round,
            "champion": state.champion,
            "repository_size": len(state.repository),
            "pool_size": len(state.pool),
            "status_counts": state.status_counts(),
            "tallies": dict(sorted(state.tallies.items())),
        }
