from __future__ import annotations

import random
import threading

import pytest

from mediaengine import store as storemod
from mediaengine.store import (
    AlreadyExists,
    Conflict,
    Lagged,
    NotFound,
    ResourceStore,
    UnknownKind,
    ValidationRejected,
    spec_changed,
)


def make_store() -> ResourceStore:
    s = ResourceStore()
    s.register_kind("Workflow")
    s.register_kind("Task")
    return s


def wf(name, namespace="default", spec=None, labels=None):
    return {
        "apiVersion": "engine.nagare.media/v1alpha1",
        "kind": "Workflow",
        "metadata": {"name": name, "namespace": namespace, "labels": labels or {}},
        "spec": spec if spec is not None else {"humanReadable": {"name": name}},
        "status": {},
    }


class TestCreate:
    def test_create_assigns_uid_and_version(self):
        s = make_store()
        stored = s.create(wf("wf-a"))
        assert stored["metadata"]["uid"]
        assert stored["metadata"]["resourceVersion"] == 1

    def test_create_twice_is_already_exists(self):
        s = make_store()
        s.create(wf("wf-a"))
        with pytest.raises(AlreadyExists):
            s.create(wf("wf-a"))

    def test_create_then_get_round_trips(self):
        # round-trip oracle: equal except server-assigned fields
        s = make_store()
        original = wf("wf-a", spec={"humanReadable": {"name": "A"}})
        stored = s.create(original)
        got = s.get("Workflow", "default", "wf-a")
        assert got == stored
        assert got["spec"] == original["spec"]
        for f in ("uid", "resourceVersion", "creationTimestamp"):
            assert f in got["metadata"]

    def test_validation_hook_rejects(self):
        s = make_store()
        s.register_admission("Workflow", validator=lambda r: (["spec must not be empty"], []) if not r.get("spec") else ([], []))
        with pytest.raises(ValidationRejected) as exc:
            s.create(wf("wf-a", spec={}))
        assert "spec must not be empty" in exc.value.messages

    def test_defaulter_runs_before_validator(self):
        s = make_store()
        order = []

        def defaulter(r):
            order.append("default")
            r["spec"].setdefault("filled", True)

        def validator(r):
            order.append("validate")
            return ([] if r["spec"].get("filled") else ["missing"], [])

        s.register_admission("Workflow", defaulter=defaulter, validator=validator)
        stored = s.create(wf("wf-a", spec={}))
        assert order == ["default", "validate"]
        assert stored["spec"]["filled"] is True

    def test_validator_warnings_surface_to_caller(self):
        s = make_store()
        s.register_admission("Workflow", validator=lambda r: ([], ["field x is deprecated"]))
        warnings: list[str] = []
        s.create(wf("wf-a"), warning_sink=warnings)
        assert warnings == ["field x is deprecated"]

    def test_admission_for_unknown_kind(self):
        s = make_store()
        with pytest.raises(UnknownKind):
            s.register_admission("Nope", validator=lambda r: ([], []))


class TestPatch:
    def test_stale_expected_version_conflicts(self):
        s = make_store()
        stored = s.create(wf("wf-a"))
        stored["spec"]["humanReadable"] = {"name": "B"}
        s.patch(stored, expected_version=1)
        with pytest.raises(Conflict):
            stored["spec"]["humanReadable"] = {"name": "C"}
            s.patch(stored, expected_version=1)

    def test_noop_patch_keeps_version_and_emits_no_event(self):
        # diff oracle: identical content -> empty delta
        s = make_store()
        stored = s.create(wf("wf-a"))
        sub = s.watch("Workflow")
        after = s.patch(stored)
        assert after["metadata"]["resourceVersion"] == stored["metadata"]["resourceVersion"]
        assert sub.get(timeout=0.05) is None

    def test_status_patch_leaves_spec_identical(self):
        s = make_store()
        stored = s.create(wf("wf-a"))
        spec_before = stored["spec"]
        update = dict(stored)
        update["spec"] = {"poisoned": True}
        update["status"] = {"phase": "Running"}
        s.patch(update, status=True)
        got = s.get("Workflow", "default", "wf-a")
        assert got["spec"] == spec_before
        assert got["status"] == {"phase": "Running"}

    def test_patch_increments_version(self):
        s = make_store()
        stored = s.create(wf("wf-a"))
        stored["spec"]["x"] = 1
        v2 = s.patch(stored)
        assert v2["metadata"]["resourceVersion"] == 2
        v2["status"] = {"phase": "Running"}
        v3 = s.patch(v2, status=True)
        assert v3["metadata"]["resourceVersion"] == 3

    def test_patch_missing_resource(self):
        s = make_store()
        with pytest.raises(NotFound):
            s.patch(wf("ghost"))


class TestDeleteAndFinalizers:
    def test_delete_with_finalizer_sets_deletion_timestamp(self):
        s = make_store()
        stored = s.create(wf("wf-a"))
        stored["metadata"]["finalizers"] = ["engine/task"]
        stored = s.patch(stored)
        s.delete("Workflow", "default", "wf-a")
        got = s.get("Workflow", "default", "wf-a")
        assert got["metadata"]["deletionTimestamp"]
        assert got["metadata"]["finalizers"] == ["engine/task"]

    def test_removing_last_finalizer_completes_removal(self):
        s = make_store()
        stored = s.create(wf("wf-a"))
        stored["metadata"]["finalizers"] = ["engine/task"]
        stored = s.patch(stored)
        s.delete("Workflow", "default", "wf-a")
        current = s.get("Workflow", "default", "wf-a")
        current["metadata"]["finalizers"] = []
        s.patch(current)
        with pytest.raises(NotFound):
            s.get("Workflow", "default", "wf-a")

    def test_deletion_timestamp_never_cleared_by_patch(self):
        s = make_store()
        stored = s.create(wf("wf-a"))
        stored["metadata"]["finalizers"] = ["engine/task"]
        stored = s.patch(stored)
        s.delete("Workflow", "default", "wf-a")
        current = s.get("Workflow", "default", "wf-a")
        ts = current["metadata"]["deletionTimestamp"]
        current["metadata"].pop("deletionTimestamp")
        current["spec"]["x"] = 1
        s.patch(current)
        assert s.get("Workflow", "default", "wf-a")["metadata"]["deletionTimestamp"] == ts

    def test_owner_cascade_removes_owned(self):
        s = make_store()
        owner = s.create(wf("wf-a"))
        for name in ("t-1", "t-2"):
            task = {
                "apiVersion": "engine.nagare.media/v1alpha1",
                "kind": "Task",
                "metadata": {
                    "name": name,
                    "namespace": "default",
                    "ownerReferences": [{"kind": "Workflow", "name": "wf-a", "uid": owner["metadata"]["uid"]}],
                },
                "spec": {},
            }
            s.create(task)
        s.delete("Workflow", "default", "wf-a")
        assert s.list("Task", "default") == []

    def test_delete_unknown_is_not_found(self):
        s = make_store()
        with pytest.raises(NotFound):
            s.delete("Workflow", "default", "ghost")


class TestWatch:
    def test_watch_with_label_selector(self):
        s = make_store()
        sub = s.watch("Task", selector={"workflow": "wf-a"})
        s.create({"kind": "Task", "metadata": {"name": "t1", "namespace": "d", "labels": {"workflow": "wf-a"}}, "spec": {}})
        s.create({"kind": "Task", "metadata": {"name": "t2", "namespace": "d", "labels": {"workflow": "wf-b"}}, "spec": {}})
        event = sub.get(timeout=1)
        assert event.type == "created"
        assert event.resource["metadata"]["name"] == "t1"
        assert sub.get(timeout=0.05) is None

    def test_spec_changed_predicate_drops_status_only_updates(self):
        s = make_store()
        stored = s.create(wf("wf-a"))
        sub = s.watch("Workflow", predicate=spec_changed)
        event = None
        update = dict(stored)
        update["status"] = {"phase": "Running"}
        s.patch(update, status=True)
        event = sub.get(timeout=0.05)
        assert event is None
        stored = s.get("Workflow", "default", "wf-a")
        stored["spec"]["x"] = 2
        s.patch(stored)
        event = sub.get(timeout=1)
        assert event is not None and event.resource["spec"]["x"] == 2

    def test_events_in_resource_version_order(self):
        # ordering oracle: replay the version log
        s = make_store()
        stored = s.create(wf("wf-a"))
        sub = s.watch("Workflow")
        for i in range(2):
            current = s.get("Workflow", "default", "wf-a")
            current["spec"]["i"] = i
            s.patch(current)
        versions = [sub.get(timeout=1).resource["metadata"]["resourceVersion"] for _ in range(2)]
        assert versions == sorted(versions)
        assert len(set(versions)) == 2

    def test_unknown_kind_watch(self):
        s = make_store()
        with pytest.raises(UnknownKind):
            s.watch("Nope")

    def test_slow_subscriber_lags_out_without_blocking_writers(self):
        s = make_store()
        sub = s.watch("Workflow", queue_size=4)
        for i in range(10):
            s.create(wf(f"wf-{i}"))
        with pytest.raises(Lagged):
            for _ in range(10):
                if sub.get(timeout=0.2) is None:
                    break

    def test_watch_fidelity_replay_reconstructs_state(self):
        # apply created/updated/deleted events in order; compare to the store
        s = make_store()
        sub = s.watch("Workflow")
        rng = random.Random(7)
        for i in range(40):
            op = rng.choice(["create", "patch", "delete"])
            names = [r["metadata"]["name"] for r in s.list("Workflow")]
            if op == "create" or not names:
                try:
                    s.create(wf(f"wf-{rng.randrange(8)}"))
                except AlreadyExists:
                    pass
            elif op == "patch":
                r = s.get("Workflow", "default", rng.choice(names))
                r["spec"]["i"] = i
                s.patch(r)
            else:
                s.delete("Workflow", "default", rng.choice(names))
        replayed = {}
        while True:
            event = sub.get(timeout=0.05)
            if event is None:
                break
            key = event.resource["metadata"]["name"]
            if event.type == "deleted":
                replayed.pop(key, None)
            else:
                replayed[key] = event.resource
        final = {r["metadata"]["name"]: r for r in s.list("Workflow")}
        assert replayed == final


class TestConcurrency:
    def test_optimistic_concurrency_never_loses_writes(self):
        s = make_store()
        s.create(wf("wf-a"))
        outcomes = []

        def writer(tag):
            current = s.get("Workflow", "default", "wf-a")
            current["spec"]["writer"] = tag
            try:
                s.patch(current, expected_version=current["metadata"]["resourceVersion"])
                outcomes.append(("ok", tag))
            except Conflict:
                outcomes.append(("conflict", tag))

        barrier = threading.Barrier(2)

        def run(tag):
            barrier.wait()
            writer(tag)

        threads = [threading.Thread(target=run, args=(t,)) for t in ("a", "b")]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        oks = [o for o in outcomes if o[0] == "ok"]
        assert len(oks) >= 1
        final = s.get("Workflow", "default", "wf-a")
        assert final["spec"]["writer"] in ("a", "b")

    def test_randomized_interleavings(self):
        # exhaustive randomized soak of finalizer, cascade, conflict and
        # ordering semantics; the acceptance suite runs this at >=1000 cases
        run_randomized_interleavings(cases=200, seed=11)


def run_randomized_interleavings(cases: int, seed: int) -> None:
    rng = random.Random(seed)
    for case in range(cases):
        s = make_store()
        sub = s.watch("Workflow")
        owner = s.create(wf("owner"))
        owned_names = []
        for i in range(rng.randrange(0, 4)):
            name = f"task-{case}-{i}"
            s.create({
                "kind": "Task",
                "metadata": {"name": name, "namespace": "default",
                             "ownerReferences": [{"uid": owner["metadata"]["uid"]}]},
                "spec": {},
            })
            owned_names.append(name)
        use_finalizer = rng.random() < 0.5
        if use_finalizer:
            current = s.get("Workflow", "default", "owner")
            current["metadata"]["finalizers"] = ["engine/test"]
            s.patch(current)
        # concurrent optimistic writers
        conflicts = []

        def contender():
            try:
                c = s.get("Workflow", "default", "owner")
                c["spec"]["n"] = rng.random()
                s.patch(c, expected_version=c["metadata"]["resourceVersion"])
            except (Conflict, NotFound):
                conflicts.append(1)

        threads = [threading.Thread(target=contender) for _ in range(3)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        s.delete("Workflow", "default", "owner")
        if use_finalizer:
            # still present until the finalizer is removed
            current = s.get("Workflow", "default", "owner")
            assert current["metadata"]["deletionTimestamp"]
            assert s.list("Task", "default") != [] or not owned_names
            current["metadata"]["finalizers"] = []
            s.patch(current)
        # removed-from-store implies finalizers were empty; cascade complete
        with pytest.raises(NotFound):
            s.get("Workflow", "default", "owner")
        assert s.list("Task", "default") == []
        # watch order per resource strictly increases
        seen_versions: dict[str, int] = {}
        while True:
            event = sub.get(timeout=0)
            if event is None:
                break
            name = event.resource["metadata"]["name"]
            v = event.resource["metadata"]["resourceVersion"]
            if event.type != "deleted" and name in seen_versions:
                assert v > seen_versions[name]
            seen_versions[name] = v
        sub.close()


class TestSnapshot:
    def test_snapshot_restart_restores_state(self, tmp_path):
        path = str(tmp_path / "snap.json")
        s = ResourceStore(snapshot_path=path)
        s.register_kind("Workflow")
        s.create(wf("wf-a"))
        stored = s.get("Workflow", "default", "wf-a")
        stored["spec"]["x"] = 42
        s.patch(stored)

        s2 = ResourceStore(snapshot_path=path)
        got = s2.get("Workflow", "default", "wf-a")
        assert got["spec"]["x"] == 42
        assert got["metadata"]["resourceVersion"] == 2
