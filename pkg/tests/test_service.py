"""HTTP session service: endpoints, locking, export/replay."""

import base64
import json
import threading
import urllib.error
import urllib.request

import numpy as np
import pytest

from ipcs import refine, scene, segnet, service


@pytest.fixture(scope="module")
def server(mini_bench):
    srv = service.serve(mini_bench["checkpoint"], str(mini_bench["root"]),
                        host="127.0.0.1", port=0)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv
    srv.shutdown()


def call(srv, method, path, body=None):
    host, port = srv.server_address[:2]
    url = f"http://{host}:{port}{path}"
    data = json.dumps(body).encode() if body is not None else None
    req = urllib.request.Request(url, data=data, method=method,
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as e:
        return e.code, json.loads(e.read())


def decode(text, dtype):
    return np.frombuffer(base64.b64decode(text), dtype=dtype)


def new_session(srv, scene_name="test_000"):
    status, body = call(srv, "POST", "/sessions", {"scene": scene_name})
    assert status == 200, body
    return body


def test_scene_and_class_listings(server):
    status, body = call(server, "GET", "/scenes")
    assert status == 200 and "test_000" in body["scenes"]
    status, body = call(server, "GET", "/classes")
    assert status == 200
    assert len(body["names"]) == len(body["palette"]) == 8


def test_create_session_on_bundled_scene(server):
    body = new_session(server)
    assert body["status"] == "Idle"
    assert body["num_points"] > 0
    assert body["miou"] is not None and body["baseline_miou"] is not None
    assert body["click_count"] == 0


def test_create_two_sessions_distinct_ids(server):
    a, b = new_session(server), new_session(server)
    assert a["id"] != b["id"]


def test_create_unknown_scene_404(server):
    status, body = call(server, "POST", "/sessions", {"scene": "nope"})
    assert status == 404 and "error" in body


def test_create_malformed_ply_400(server):
    status, body = call(server, "POST", "/sessions", {"ply": "not a ply file"})
    assert status == 400 and "error" in body


def test_upload_unlabeled_ply(server, tmp_path):
    cloud = scene.generate_scene(scene.SceneSpec(
        extents=(1.5, 1.2, 1.2), points_per_m2=80.0, seed=3))
    bare = scene.LabeledCloud(cloud.positions, cloud.features, None, "upload")
    path = tmp_path / "u.ply"
    scene.save_ply(bare, path)
    status, body = call(server, "POST", "/sessions", {"ply": path.read_text()})
    assert status == 200
    assert body["miou"] is None
    assert body["has_ground_truth"] is False


def test_get_state_summary_and_full(server):
    sid = new_session(server)["id"]
    status, summary = call(server, "GET", f"/sessions/{sid}/state")
    assert status == 200 and summary["clicks"] == []
    status, full = call(server, "GET", f"/sessions/{sid}/state?detail=full")
    assert status == 200
    n = full["num_points"]
    assert len(decode(full["positions"], "<f4")) == 3 * n
    assert len(decode(full["colors"], "<f4")) == 3 * n
    assert len(decode(full["labels"], "<i4")) == n
    assert len(decode(full["entropies"], "<f4")) == n


def test_get_state_idempotent(server):
    sid = new_session(server)["id"]
    _, a = call(server, "GET", f"/sessions/{sid}/state?detail=full")
    _, b = call(server, "GET", f"/sessions/{sid}/state?detail=full")
    a.pop("created_at"), b.pop("created_at")
    assert a == b


def test_get_state_unknown_session(server):
    status, _ = call(server, "GET", "/sessions/doesnotexist/state")
    assert status == 404


def wrong_point(server, sid):
    _, full = call(server, "GET", f"/sessions/{sid}/state?detail=full")
    pred = decode(full["labels"], "<i4")
    gt = decode(full["gt_labels"], "<i4")
    wrong = np.nonzero(pred != gt)[0]
    idx = int(wrong[0]) if len(wrong) else 0
    return idx, int(gt[idx])


def test_post_clicks_applies_diff(server):
    sid = new_session(server)["id"]
    idx, label = wrong_point(server, sid)
    status, diff = call(server, "POST", f"/sessions/{sid}/clicks",
                        {"clicks": [{"point_index": idx, "corrected_label": label}]})
    assert status == 200
    assert diff["click_count"] == 1
    assert len(diff["energy_trace"]) >= 1
    # applying the diff to the old labels reproduces the full state
    _, before_full = call(server, "GET", f"/sessions/{sid}/state?detail=full")
    labels = decode(before_full["labels"], "<i4").copy()
    # (state already advanced; reconstruct from scratch instead)
    _, full = call(server, "GET", f"/sessions/{sid}/state?detail=full")
    current = decode(full["labels"], "<i4")
    assert full["click_count"] == 1
    assert current[idx] >= 0


def test_click_diff_matches_refetch(server):
    sid = new_session(server)["id"]
    _, full0 = call(server, "GET", f"/sessions/{sid}/state?detail=full")
    labels = decode(full0["labels"], "<i4").copy()
    idx, label = wrong_point(server, sid)
    _, diff = call(server, "POST", f"/sessions/{sid}/clicks",
                   {"clicks": [{"point_index": idx, "corrected_label": label}]})
    labels[np.array(diff["changed_indices"], dtype=int)] = diff["new_labels"]
    _, full1 = call(server, "GET", f"/sessions/{sid}/state?detail=full")
    assert np.array_equal(labels, decode(full1["labels"], "<i4"))


def test_post_clicks_out_of_range_400(server):
    sid = new_session(server)["id"]
    status, body = call(server, "POST", f"/sessions/{sid}/clicks",
                        {"clicks": [{"point_index": 10 ** 9, "corrected_label": 0}]})
    assert status == 400 and "offenders" in body


def test_empty_clicks_without_history_400(server):
    sid = new_session(server)["id"]
    status, body = call(server, "POST", f"/sessions/{sid}/clicks", {"clicks": []})
    assert status == 400


def test_empty_clicks_with_history_continues(server):
    sid = new_session(server)["id"]
    idx, label = wrong_point(server, sid)
    call(server, "POST", f"/sessions/{sid}/clicks",
         {"clicks": [{"point_index": idx, "corrected_label": label}]})
    status, body = call(server, "POST", f"/sessions/{sid}/clicks", {"clicks": []})
    assert status == 200
    assert body["rounds"] == 2 and body["click_count"] == 1


def test_concurrent_clicks_exactly_one_conflict(server):
    sid = new_session(server)["id"]
    idx, label = wrong_point(server, sid)
    results = []

    def submit(i):
        status, _ = call(server, "POST", f"/sessions/{sid}/clicks",
                         {"clicks": [{"point_index": idx + i,
                                      "corrected_label": label}]})
        results.append(status)

    threads = [threading.Thread(target=submit, args=(i,)) for i in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(results) == [200, 409]


def test_reset_restores_post_warmup_state(server):
    sid = new_session(server)["id"]
    _, full0 = call(server, "GET", f"/sessions/{sid}/state?detail=full")
    idx, label = wrong_point(server, sid)
    call(server, "POST", f"/sessions/{sid}/clicks",
         {"clicks": [{"point_index": idx, "corrected_label": label}]})
    status, summary = call(server, "POST", f"/sessions/{sid}/reset")
    assert status == 200 and summary["click_count"] == 0
    _, full1 = call(server, "GET", f"/sessions/{sid}/state?detail=full")
    assert full0["labels"] == full1["labels"]
    assert full0["entropies"] == full1["entropies"]
    assert full1["miou"] == pytest.approx(full0["miou"], abs=1e-9)
    # reset twice: idempotent
    call(server, "POST", f"/sessions/{sid}/reset")
    _, full2 = call(server, "GET", f"/sessions/{sid}/state?detail=full")
    assert full1["labels"] == full2["labels"]


def test_export_replays_to_identical_labels(server, mini_bench):
    sid = new_session(server, "test_001")["id"]
    for _ in range(2):
        idx, label = wrong_point(server, sid)
        call(server, "POST", f"/sessions/{sid}/clicks",
             {"clicks": [{"point_index": idx, "corrected_label": label}]})
    status, doc = call(server, "GET", f"/sessions/{sid}/export")
    assert status == 200 and doc["format"] == "ipcs-session/1"
    _, full = call(server, "GET", f"/sessions/{sid}/state?detail=full")
    final = decode(full["labels"], "<i4")

    cloud = scene.load_ply(mini_bench["root"] / f"{doc['scene']}.ply")
    params = segnet.load_params(mini_bench["checkpoint"])
    replayed = refine.replay_session(cloud, params, doc)
    assert np.array_equal(replayed.seg.labels.astype(np.int32), final)
