import json
import subprocess
import sys
import time
import urllib.error
import urllib.request

import numpy as np
import pytest

from sgctx.dataset import ShapesWorldConfig, generate_shapes_world, save_split
from sgctx.metrics import aggregate_study, canonical_json, records_from_csv
from sgctx.service import RatingService
from sgctx.study import export_mors_study


@pytest.fixture(scope="module")
def study_root(tmp_path_factory):
    """Data root holding an exported 20-trial MORS study."""
    root = tmp_path_factory.mktemp("svc")
    split = generate_shapes_world(ShapesWorldConfig(seed=21, scenes=12, image_size=16))
    ds = root / "ds"
    save_split(split, ds)
    export_mors_study(
        split, images_dir=ds, gt_dir=ds, out_dir=root / "export",
        count=20, seed=5, control_rate=0.10,
    )
    return root


def _request(method, url, body=None):
    data = json.dumps(body).encode() if body is not None else None
    req = urllib.request.Request(url, data=data, method=method)
    if data:
        req.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        payload = exc.read()
        return exc.code, json.loads(payload) if payload else {}


@pytest.fixture()
def service(study_root):
    svc = RatingService(study_root, port=0)
    svc.start()
    yield svc, f"http://127.0.0.1:{svc.port}"
    svc.stop()


def _create_study(base, study_root):
    manifest = json.loads((study_root / "export" / "manifest.json").read_text())
    # media refs are relative to the data root
    for t in manifest["trials"]:
        t["media"] = [f"export/{m}" for m in t["media"]]
    status, doc = _request("POST", f"{base}/studies", manifest)
    assert status == 201, doc
    return doc["study_id"]


class TestStudyLifecycle:
    def test_create_and_next_and_submit(self, service, study_root):
        svc, base = service
        sid = _create_study(base, study_root)

        status, task = _request("GET", f"{base}/studies/{sid}/next?worker=w1")
        assert status == 200
        assert set(task) == {"trial_id", "design", "media", "prompt", "progress"}
        # blinding: payload carries no model identity or control flag
        assert "model" not in json.dumps(task)
        assert "control" not in json.dumps(task)

        req = urllib.request.Request(f"{base}{task['media'][0]}")
        with urllib.request.urlopen(req, timeout=10) as resp:
            assert resp.status == 200
            assert resp.headers["Content-Type"] == "image/x-portable-pixmap"
            assert resp.read().startswith(b"P6")

        status, ack = _request(
            "POST", f"{base}/studies/{sid}/ratings",
            {"worker": "w1", "trial": task["trial_id"], "answer": "yes"},
        )
        assert status == 201 and ack == {"accepted": True}
        log = (study_root / "studies" / sid / "ratings.csv").read_text()
        assert len(log.strip().splitlines()) == 2  # header + one row

    def test_refresh_reserves_same_pending_trial(self, service, study_root):
        svc, base = service
        sid = _create_study(base, study_root)
        _, a = _request("GET", f"{base}/studies/{sid}/next?worker=w9")
        _, b = _request("GET", f"{base}/studies/{sid}/next?worker=w9")
        assert a["trial_id"] == b["trial_id"]

    def test_duplicate_submission_409(self, service, study_root):
        svc, base = service
        sid = _create_study(base, study_root)
        _, task = _request("GET", f"{base}/studies/{sid}/next?worker=w2")
        body = {"worker": "w2", "trial": task["trial_id"], "answer": "no"}
        status1, _ = _request("POST", f"{base}/studies/{sid}/ratings", body)
        status2, err = _request("POST", f"{base}/studies/{sid}/ratings", body)
        assert status1 == 201
        assert status2 == 409
        log = (study_root / "studies" / sid / "ratings.csv").read_text()
        assert len(log.strip().splitlines()) == 2

    def test_unserved_trial_rejected(self, service, study_root):
        svc, base = service
        sid = _create_study(base, study_root)
        status, err = _request(
            "POST", f"{base}/studies/{sid}/ratings",
            {"worker": "w3", "trial": "t0000", "answer": "yes"},
        )
        assert status == 400
        assert "not served" in err["error"]

    def test_unknown_study_404(self, service):
        svc, base = service
        status, _ = _request("GET", f"{base}/studies/nope/next?worker=w")
        assert status == 404

    def test_bad_answer_rejected(self, service, study_root):
        svc, base = service
        sid = _create_study(base, study_root)
        _, task = _request("GET", f"{base}/studies/{sid}/next?worker=w4")
        status, err = _request(
            "POST", f"{base}/studies/{sid}/ratings",
            {"worker": "w4", "trial": task["trial_id"], "answer": "A"},
        )
        assert status == 400

    def test_duplicate_trial_ids_rejected(self, service, study_root):
        svc, base = service
        manifest = json.loads((study_root / "export" / "manifest.json").read_text())
        for t in manifest["trials"]:
            t["media"] = [f"export/{m}" for m in t["media"]]
            t["id"] = "same"
        status, err = _request("POST", f"{base}/studies", manifest)
        assert status == 400
        assert "duplicate" in err["error"]

    def test_missing_media_listed(self, service, study_root):
        svc, base = service
        manifest = json.loads((study_root / "export" / "manifest.json").read_text())
        for t in manifest["trials"]:
            t["media"] = ["export/media/does_not_exist.ppm"]
        status, err = _request("POST", f"{base}/studies", manifest)
        assert status == 400
        assert "missing media" in err["error"]

    def test_results_before_ratings_400(self, service, study_root):
        svc, base = service
        sid = _create_study(base, study_root)
        status, err = _request("GET", f"{base}/studies/{sid}/results")
        assert status == 400
        assert "no ratings" in err["error"]


def _run_worker(base, sid, worker, answer_fn):
    rated = 0
    while True:
        _, task = _request("GET", f"{base}/studies/{sid}/next?worker={worker}")
        if task.get("done"):
            return rated
        _request(
            "POST", f"{base}/studies/{sid}/ratings",
            {"worker": worker, "trial": task["trial_id"],
             "answer": answer_fn(task)},
        )
        rated += 1


class TestSimulatedStudy:
    def test_five_workers_reach_target_everywhere(self, service, study_root):
        svc, base = service
        sid = _create_study(base, study_root)
        for w in range(5):
            _run_worker(base, sid, f"worker{w}", lambda task: "yes")
        log = records_from_csv(
            (study_root / "studies" / sid / "ratings.csv").read_text()
        )
        per_trial = {}
        for r in log:
            per_trial[r.trial_id] = per_trial.get(r.trial_id, 0) + 1
        assert set(per_trial.values()) == {5}

        # a sixth worker has nothing to do: all trials reached the target
        _, task = _request("GET", f"{base}/studies/{sid}/next?worker=late")
        assert task.get("done") is True

    def test_worker_orders_differ_but_cover_same_set(self, service, study_root):
        svc, base = service
        store = svc[0].store if isinstance(svc, tuple) else svc.store
        sid = _create_study(base, study_root)
        state = store.studies[sid]
        orders = [store._worker_order(state, f"w{i}") for i in range(4)]
        for o in orders:
            assert sorted(o) == sorted(orders[0])
        assert len({tuple(o) for o in orders}) > 1

    def test_service_results_equal_offline_aggregation(self, service, study_root):
        svc, base = service
        sid = _create_study(base, study_root)
        rng = np.random.default_rng(3)
        for w in range(5):
            # worker 4 answers randomly; everyone else honestly says yes
            if w == 4:
                _run_worker(
                    base, sid, f"sim{w}",
                    lambda task: ("yes" if rng.random() < 0.3 else "no"),
                )
            else:
                _run_worker(base, sid, f"sim{w}", lambda task: "yes")
        status, via_http = _request("GET", f"{base}/studies/{sid}/results")
        assert status == 200

        records = records_from_csv(
            (study_root / "studies" / sid / "ratings.csv").read_text()
        )
        offline = aggregate_study(records, "mors", min_control_accuracy=0.8)
        assert canonical_json(via_http) == canonical_json(offline.to_json_dict())

    def test_noisy_worker_lands_in_excluded_list(self, service, study_root):
        svc, base = service
        sid = _create_study(base, study_root)
        for w in range(4):
            _run_worker(base, sid, f"good{w}", lambda task: "yes")
        _run_worker(base, sid, "badactor", lambda task: "no")
        _, result = _request("GET", f"{base}/studies/{sid}/results")
        assert "badactor" in result["excluded_workers"]


class TestCrashRestart:
    def test_acknowledged_ratings_survive_kill(self, study_root, tmp_path):
        import socket

        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]

        proc = subprocess.Popen(
            [sys.executable, "-m", "sgctx.cli", "serve", "--root", str(study_root),
             "--port", str(port)],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
        )
        try:
            base = f"http://127.0.0.1:{port}"
            for _ in range(50):
                try:
                    urllib.request.urlopen(base + "/studies/x/results", timeout=1)
                    break
                except urllib.error.HTTPError:
                    break
                except Exception:
                    time.sleep(0.1)
            sid = _create_study(base, study_root)
            _, task = _request("GET", f"{base}/studies/{sid}/next?worker=w")
            status, _ = _request(
                "POST", f"{base}/studies/{sid}/ratings",
                {"worker": "w", "trial": task["trial_id"], "answer": "yes"},
            )
            assert status == 201
        finally:
            proc.kill()
            proc.wait()

        # restart in-process on the same data root: the ack'd rating is there
        svc = RatingService(study_root, port=0)
        try:
            svc.start()
            base = f"http://127.0.0.1:{svc.port}"
            status, result = _request("GET", f"{base}/studies/{sid}/results")
            assert status == 200
            assert result["n_scored_items"] >= 1 or result["worker_count"] == 1
            # and the same (worker, trial) cannot be double-submitted
            status, _ = _request(
                "POST", f"{base}/studies/{sid}/ratings",
                {"worker": "w", "trial": task["trial_id"], "answer": "yes"},
            )
            assert status == 409
        finally:
            svc.stop()
