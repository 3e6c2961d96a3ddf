from __future__ import annotations

import time

import pytest
from hypothesis import given, strategies as st

from mediaengine import model
from mediaengine.model import (
    MediaLocationURL,
    NotEngineURL,
    PathEscapesBase,
    TaskURL,
    merge_job_templates,
    parse_engine_url,
    resolve_media_location_url,
    set_condition,
    strip_reserved_headers,
)
from mediaengine.store import ResourceStore, ValidationRejected


class TestEngineURL:
    def test_task_url_parses(self):
        url = parse_engine_url("nme-task://wf1/enc0/out")
        assert url == TaskURL("wf1", "enc0", "out")

    def test_ordinary_url_is_not_engine(self):
        with pytest.raises(NotEngineURL):
            parse_engine_url("https://example.com/x")

    def test_media_location_url_parses(self):
        url = parse_engine_url("nme-medialocation://s3-main/in/video.ts")
        assert url == MediaLocationURL("s3-main", "in/video.ts")

    def test_malformed_task_url(self):
        from mediaengine.model import MalformedEngineURL

        with pytest.raises(MalformedEngineURL):
            parse_engine_url("nme-task://wf1/only-task")

    @given(
        st.text(alphabet=st.characters(whitelist_categories=("Ll", "Nd")), min_size=1, max_size=12),
        st.text(alphabet=st.characters(whitelist_categories=("Ll", "Nd")), min_size=1, max_size=12),
        st.text(alphabet=st.characters(whitelist_categories=("Ll", "Nd")), min_size=1, max_size=12),
    )
    def test_task_url_round_trip(self, wf, task, port):
        u = TaskURL(wf, task, port)
        assert parse_engine_url(str(u)) == u

    @given(
        st.text(alphabet=st.characters(whitelist_categories=("Ll", "Nd")), min_size=1, max_size=12),
        st.lists(st.text(alphabet=st.characters(whitelist_categories=("Ll", "Nd")), min_size=1, max_size=8), min_size=0, max_size=3),
    )
    def test_media_location_url_round_trip(self, loc, segments):
        u = MediaLocationURL(loc, "/".join(segments))
        assert parse_engine_url(str(u)) == u


class TestMediaLocationResolve:
    def test_http_base_join(self):
        loc = {"spec": {"http": {"baseURL": "https://cdn.io/media"}}}
        assert resolve_media_location_url(loc, "a/b.ts") == "https://cdn.io/media/a/b.ts"

    def test_query_params_appended(self):
        loc = {"spec": {"http": {"baseURL": "https://h/m", "queryParams": {"tok": "x"}}}}
        assert resolve_media_location_url(loc, "f").endswith("?tok=x")

    def test_traversal_escapes_base(self):
        loc = {"spec": {"http": {"baseURL": "https://cdn.io/media"}}}
        with pytest.raises(PathEscapesBase):
            resolve_media_location_url(loc, "../secret")

    def test_headers_ride_as_reserved_params_and_strip(self):
        loc = {"spec": {"http": {"baseURL": "https://h/m", "headers": {"X-Api-Key": "k1"}}}}
        url = resolve_media_location_url(loc, "f.ts")
        clean, headers = strip_reserved_headers(url)
        assert headers == {"X-Api-Key": "k1"}
        assert clean == "https://h/m/f.ts"

    def test_basic_auth_encoded(self):
        loc = {"spec": {"http": {"baseURL": "https://h/m", "basicAuth": {"username": "u", "password": "p"}}}}
        _, headers = strip_reserved_headers(resolve_media_location_url(loc, "f"))
        assert headers["Authorization"].startswith("Basic ")

    def test_s3_form(self):
        loc = {"spec": {"s3": {"bucket": "b", "region": "eu-1", "endpointURL": "https://s3.local"}}}
        url = resolve_media_location_url(loc, "x/y.ts")
        assert url.startswith("s3://b/x/y.ts?")
        assert "region=eu-1" in url


class TestConditions:
    def test_set_same_status_keeps_timestamp(self):
        status: dict = {}
        set_condition(status, "Ready", "True", "init", "ok")
        first = status["conditions"][0]["lastTransitionTime"]
        time.sleep(1.1)
        set_condition(status, "Ready", "True", "again", "still ok")
        assert status["conditions"][0]["lastTransitionTime"] == first
        assert status["conditions"][0]["reason"] == "again"

    def test_status_flip_updates_timestamp(self):
        status: dict = {}
        set_condition(status, "Ready", "True")
        first = status["conditions"][0]["lastTransitionTime"]
        time.sleep(1.1)
        set_condition(status, "Ready", "False", "gone")
        assert status["conditions"][0]["lastTransitionTime"] != first

    def test_set_on_empty_list(self):
        status: dict = {}
        set_condition(status, "Complete", "True")
        assert len(status["conditions"]) == 1

    def test_one_condition_per_type(self):
        status: dict = {}
        set_condition(status, "Ready", "True")
        set_condition(status, "Failed", "False")
        set_condition(status, "Ready", "False")
        types = [c["type"] for c in status["conditions"]]
        assert sorted(types) == ["Failed", "Ready"]


class TestJobTemplateMerge:
    def test_later_wins_per_field(self):
        base = {"command": ["f"], "workdir": "/a", "env": {"A": "1"}, "args": ["x", "y"]}
        merged = merge_job_templates(base, {"workdir": "/b"}, {"command": ["g"]})
        assert merged["command"] == ["g"]
        assert merged["workdir"] == "/b"

    def test_env_merged_by_key(self):
        merged = merge_job_templates({"env": {"A": "1", "B": "2"}}, {"env": {"B": "3", "C": "4"}})
        assert merged["env"] == {"A": "1", "B": "3", "C": "4"}

    def test_args_merged_by_position(self):
        merged = merge_job_templates({"args": ["a", "b", "c"]}, {"args": ["x"]})
        assert merged["args"] == ["x", "b", "c"]
        merged = merge_job_templates({"args": ["a"]}, {"args": ["x", "y"]})
        assert merged["args"] == ["x", "y"]


class TestAdmission:
    def make_store(self):
        s = ResourceStore()
        model.register_engine_kinds(s)
        return s

    def test_mpe_local_xor_remote(self):
        s = self.make_store()
        with pytest.raises(ValidationRejected):
            s.create(model.new_resource(model.KIND_MPE, "both", "d",
                                        spec={"local": {"namespace": "x"}, "remote": {"connectionSecretRef": {"name": "s"}}}))
        s.create(model.new_resource(model.KIND_MPE, "ok", "d", spec={"local": {"namespace": "x"}}))

    def test_function_requires_command(self):
        s = self.make_store()
        with pytest.raises(ValidationRejected):
            s.create(model.new_resource(model.KIND_FUNCTION, "f", "d", spec={"template": {}}))
        s.create(model.new_resource(model.KIND_FUNCTION, "f", "d", spec={"template": {"command": ["run"]}}))

    def test_media_location_base_url_absolute(self):
        s = self.make_store()
        with pytest.raises(ValidationRejected):
            s.create(model.new_resource(model.KIND_MEDIA_LOCATION, "m", "d", spec={"http": {"baseURL": "/rel"}}))

    def test_task_template_ref_xor_selector(self):
        s = self.make_store()
        with pytest.raises(ValidationRejected):
            s.create(model.new_resource(model.KIND_TASK_TEMPLATE, "t", "d",
                                        spec={"mpeRef": {"name": "a"}, "mpeSelector": {"x": "y"}}))

    def test_task_requires_workflow_ref(self):
        s = self.make_store()
        with pytest.raises(ValidationRejected):
            s.create(model.new_resource(model.KIND_TASK, "t", "d", spec={}))

    def test_task_binding_defaults(self):
        s = self.make_store()
        task = model.new_resource(model.KIND_TASK, "t", "d", spec={
            "workflowRef": {"name": "wf"},
            "inputPortBindings": [{"portName": "in", "media": {"id": "s1", "url": "http://x/"}}],
        })
        stored = s.create(task)
        media = stored["spec"]["inputPortBindings"][0]["media"]
        assert media["direction"] == "push"
        assert media["type"] == "media"

    def test_pull_binding_requires_url(self):
        s = self.make_store()
        task = model.new_resource(model.KIND_TASK, "t", "d", spec={
            "workflowRef": {"name": "wf"},
            "inputPortBindings": [{"portName": "in", "media": {"id": "s1", "direction": "pull"}}],
        })
        with pytest.raises(ValidationRejected):
            s.create(task)

    def test_cluster_variants_share_spec_codec(self):
        # scoped-variant equivalence: byte-identical spec serialization
        import json

        s = self.make_store()
        spec = {"template": {"command": ["run"], "env": {"A": "1"}}, "version": "1.2.3"}
        namespaced = s.create(model.new_resource(model.KIND_FUNCTION, "f", "d", spec=dict(spec)))
        cluster = s.create(model.new_resource(model.KIND_CLUSTER_FUNCTION, "f", spec=dict(spec)))
        assert json.dumps(namespaced["spec"], sort_keys=True) == json.dumps(cluster["spec"], sort_keys=True)
        assert cluster["metadata"]["namespace"] == ""
