import json
import threading
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor

import pytest

from toolsel.embed import EmbedderSpec, SyntheticEmbedder, embed_corpus
from toolsel.pipeline import Engine, MissingArtifactError
from toolsel.serve import (FILES, BadRequest, ServeConfig, build_engine, make_server, parse_select_body,
                           save_embedder_spec, start_background)
from toolsel.store import write_embedding_table, write_jsonl, tool_to_json
from toolsel.synth import EXCHANGE_CLUSTERS, router_tools


def _router_engine(stage="se"):
    tools = router_tools()
    emb = SyntheticEmbedder(64, 0, dict(EXCHANGE_CLUSTERS))
    return Engine(tools, emb, embed_corpus(emb, tools), stage, 5)


@pytest.fixture
def server():
    srv = make_server(ServeConfig(bind="127.0.0.1:0"), _router_engine())
    start_background(srv)
    yield srv
    srv.shutdown()
    srv.server_close()


def _url(srv, path):
    host, port = srv.server_address[:2]
    return f"http://{host}:{port}{path}"


def _post(srv, body, raw=None):
    data = raw if raw is not None else json.dumps(body).encode()
    req = urllib.request.Request(_url(srv, "/v1/select"), data=data, method="POST",
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read())


def test_select_currency_query(server):
    status, payload = _post(server, {"query": "convert 100 usd to eur", "k": 3})
    assert status == 200
    ids = [t["id"] for t in payload["tools"]]
    assert len(ids) == 3 and "ExchangeTool" in ids
    assert payload["generation"] == 0 and payload["latency_ms"] >= 0
    scores = [t["score"] for t in payload["tools"]]
    assert scores == sorted(scores, reverse=True)


def test_default_k(server):
    status, payload = _post(server, {"query": "weather in paris"})
    assert status == 200 and len(payload["tools"]) == 5


@pytest.mark.parametrize("body", [{"k": 3}, {"query": ""}, {"query": "x", "k": 0}, {"query": "x", "k": True}, [1]])
def test_bad_bodies_are_400(server, body):
    assert _post(server, body)[0] == 400


def test_malformed_json_is_400(server):
    assert _post(server, None, raw=b"{not json")[0] == 400


def test_health_and_unknown_route(server):
    with urllib.request.urlopen(_url(server, "/v1/health"), timeout=10) as resp:
        assert json.loads(resp.read()) == {"generation": 0, "stage": "se"}
    with pytest.raises(urllib.error.HTTPError) as err:
        urllib.request.urlopen(_url(server, "/nope"), timeout=10)
    assert err.value.code == 404


def test_no_engine_is_503():
    srv = make_server(ServeConfig(bind="127.0.0.1:0"), _router_engine())
    srv.engine = None
    start_background(srv)
    try:
        assert _post(srv, {"query": "x"})[0] == 503
    finally:
        srv.shutdown()
        srv.server_close()


def test_concurrent_selects_see_one_generation_during_swap(server):
    engine = server.engine
    old = engine.store.current
    swapped = threading.Event()

    def call(i):
        if i == 500:
            engine.swap(old.with_generation(0, approved=True))
            swapped.set()
        return _post(server, {"query": f"convert currency {i}", "k": 3})

    with ThreadPoolExecutor(8) as pool:
        results = list(pool.map(call, range(1000)))
    assert swapped.is_set()
    assert all(status == 200 for status, _ in results)
    gens = {p["generation"] for _, p in results}
    assert gens <= {0, 1} and 1 in gens


def test_parse_select_body():
    assert parse_select_body(b'{"query": "hi"}', 4) == ("hi", 4)
    with pytest.raises(BadRequest):
        parse_select_body(b"", 4)


def test_config_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        ServeConfig(K=0)
    with pytest.raises(ValueError):
        ServeConfig(stage="random")
    with pytest.raises(ValueError):
        ServeConfig(bind="8080")
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"K": 3, "stage": "oats_s1", "bind": "0.0.0.0:9000"}))
    c = ServeConfig.from_json(path)
    assert c.K == 3 and c.address == ("0.0.0.0", 9000)
    path.write_text(json.dumps({"K": 3, "colour": "red"}))
    with pytest.raises(ValueError):
        ServeConfig.from_json(path)


def test_build_engine_from_directory(tmp_path):
    tools = router_tools()
    spec = EmbedderSpec("synthetic", 64, None, 0, tuple(EXCHANGE_CLUSTERS))
    write_jsonl(tmp_path / FILES["tools"], map(tool_to_json, tools))
    save_embedder_spec(spec, tmp_path / FILES["embedder"])
    write_embedding_table(embed_corpus(spec, tools), tmp_path / FILES["base_table"])
    engine = build_engine(ServeConfig(data_dir=str(tmp_path)))
    assert "ExchangeTool" in engine.select("convert 100 usd to eur", 3).ids
    with pytest.raises(MissingArtifactError):
        build_engine(ServeConfig(stage="s1", data_dir=str(tmp_path)))
    with pytest.raises(MissingArtifactError):
        build_engine(ServeConfig(stage="s3", data_dir=str(tmp_path)))
