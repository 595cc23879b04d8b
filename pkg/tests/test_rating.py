import json
import random
import threading

import numpy as np
import pytest
import requests

from kcross.errors import InsufficientDataError, NotFoundError, ValidationError
from kcross.phantom import load_manifest, write_suite
from kcross.rating import (
    RatingService,
    RatingStore,
    aggregate_levels,
    serve,
    validate_level,
)


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    root = tmp_path_factory.mktemp("rating_suite")
    manifest = write_suite(root, n=6, seed=9, size=32)
    return load_manifest(manifest)


@pytest.fixture()
def store(tmp_path):
    s = RatingStore(tmp_path / "ratings.jsonl")
    yield s
    s.close()


class TestAggregation:
    def test_ten_rater_worked_example(self):
        levels = [0.1] + [0.5] * 8 + [0.9]
        assert aggregate_levels(levels) == 0.5

    def test_drop_one_each_extreme(self):
        assert aggregate_levels([0.0, 0.0, 0.9]) == 0.0

    def test_all_equal(self):
        assert aggregate_levels([0.3, 0.3, 0.3]) == 0.3

    def test_tie_rounds_up(self):
        # trimmed mean 0.25 -> 0.3
        assert aggregate_levels([0.1, 0.2, 0.3, 0.4]) == 0.3

    def test_order_invariance(self):
        rng = random.Random(0)
        levels = [0.1] + [0.5] * 8 + [0.9]
        for _ in range(100):
            rng.shuffle(levels)
            assert aggregate_levels(levels) == 0.5

    def test_within_min_max(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            levels = list(rng.choice(np.round(np.arange(10) / 10, 1), size=rng.integers(3, 12)))
            agg = aggregate_levels(levels)
            assert min(levels) <= agg <= max(levels)

    def test_insufficient_ratings(self):
        with pytest.raises(InsufficientDataError) as exc:
            aggregate_levels([0.5, 0.6])
        assert exc.value.count == 2


class TestLevels:
    def test_grid_accepted(self):
        for i in range(10):
            assert validate_level(i / 10) == round(i / 10, 1)

    def test_off_grid_rejected(self):
        for bad in (0.95, -0.1, 1.0, 0.55, "high", None):
            with pytest.raises(ValidationError):
                validate_level(bad)


class TestStore:
    def test_upsert_keeps_one_record(self, store):
        store.submit("img1", "raterA", 0.7)
        store.submit("img1", "raterA", 0.4)
        ratings = store.ratings_for("img1")
        assert len(ratings) == 1
        assert ratings[0].level == 0.4

    def test_ten_raters_ten_records(self, store):
        for i in range(10):
            store.submit("img1", f"rater{i}", 0.5)
        assert len(store.ratings_for("img1")) == 10

    def test_persisted_across_reopen(self, tmp_path):
        path = tmp_path / "r.jsonl"
        s = RatingStore(path)
        s.submit("img1", "a", 0.3)
        s.submit("img2", "a", 0.6)
        s.close()
        s2 = RatingStore(path)
        assert s2.count() == 2
        assert s2.ratings_for("img2")[0].level == 0.6
        s2.close()

    def test_unknown_image_rejected(self, store):
        with pytest.raises(NotFoundError):
            store.submit("ghost", "a", 0.5, known_images={"img1"})

    def test_compaction_preserves_active(self, tmp_path):
        path = tmp_path / "r.jsonl"
        s = RatingStore(path)
        for i in range(20):
            s.submit("img1", "a", round((i % 10) / 10, 1))
        s.compact()
        assert s.count() == 1
        assert len(path.read_text().splitlines()) == 1
        assert s.ratings_for("img1")[0].level == 0.9
        s.close()

    def test_aggregate_through_store(self, store):
        for i, level in enumerate([0.1] + [0.5] * 8 + [0.9]):
            store.submit("imgX", f"r{i}", level)
        assert store.aggregate("imgX") == 0.5


@pytest.fixture()
def live_service(suite, tmp_path):
    store = RatingStore(tmp_path / "ratings.jsonl")
    service = RatingService(suite, store)
    server = serve(service, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    yield base, service
    server.shutdown()
    store.close()


class TestHTTP:
    def test_next_pair_and_panels(self, live_service):
        base, _ = live_service
        resp = requests.get(f"{base}/api/pairs/next", params={"rater": "doc1"})
        assert resp.status_code == 200
        payload = resp.json()
        assert not payload["done"]
        assert payload["remaining"] == 6
        assert set(payload["panels"]) == {
            "reference",
            "synthesized",
            "error_map",
            "kspace_reference",
            "kspace_synthesized",
        }
        for url in payload["panels"].values():
            img = requests.get(base + url)
            assert img.status_code == 200
            assert img.headers["Content-Type"] == "image/png"
            assert img.content[:8] == b"\x89PNG\r\n\x1a\n"

    def test_rating_round_trip_advances_queue(self, live_service):
        base, _ = live_service
        first = requests.get(f"{base}/api/pairs/next", params={"rater": "doc2"}).json()
        resp = requests.post(
            f"{base}/api/ratings",
            json={"image_id": first["image_id"], "rater_id": "doc2", "level": 0.7},
        )
        assert resp.status_code == 200
        assert resp.json()["level"] == 0.7
        second = requests.get(f"{base}/api/pairs/next", params={"rater": "doc2"}).json()
        assert second["image_id"] != first["image_id"]
        assert second["remaining"] == 5

    def test_off_grid_level_is_400(self, live_service):
        base, _ = live_service
        first = requests.get(f"{base}/api/pairs/next", params={"rater": "doc3"}).json()
        resp = requests.post(
            f"{base}/api/ratings",
            json={"image_id": first["image_id"], "rater_id": "doc3", "level": 0.95},
        )
        assert resp.status_code == 400
        assert resp.json()["error"] == "validation"

    def test_unknown_image_is_404(self, live_service):
        base, _ = live_service
        resp = requests.post(
            f"{base}/api/ratings",
            json={"image_id": "ghost", "rater_id": "doc", "level": 0.5},
        )
        assert resp.status_code == 404

    def test_aggregate_endpoint(self, live_service, suite):
        base, _ = live_service
        image_id = suite[0].id
        for i, level in enumerate([0.2, 0.4, 0.6]):
            requests.post(
                f"{base}/api/ratings",
                json={"image_id": image_id, "rater_id": f"agg{i}", "level": level},
            )
        resp = requests.get(f"{base}/api/images/{image_id}/aggregate")
        assert resp.status_code == 200
        assert resp.json() == {"image_id": image_id, "level": 0.4, "count": 3}

    def test_aggregate_needs_three(self, live_service, suite):
        base, _ = live_service
        image_id = suite[1].id
        requests.post(
            f"{base}/api/ratings",
            json={"image_id": image_id, "rater_id": "solo", "level": 0.5},
        )
        resp = requests.get(f"{base}/api/images/{image_id}/aggregate")
        assert resp.status_code == 409
        assert resp.json()["count"] == 1

    def test_export_contains_rated_images(self, live_service, suite):
        base, _ = live_service
        image_id = suite[2].id
        for i in range(3):
            requests.post(
                f"{base}/api/ratings",
                json={"image_id": image_id, "rater_id": f"e{i}", "level": 0.8},
            )
        resp = requests.get(f"{base}/api/export")
        lines = [json.loads(line) for line in resp.text.splitlines() if line]
        exported = {line["id"]: line for line in lines}
        assert image_id in exported
        assert exported[image_id]["rated_level"] == 0.8

    def test_empty_queue_completion(self, live_service, suite):
        base, _ = live_service
        for record in suite:
            requests.post(
                f"{base}/api/ratings",
                json={"image_id": record.id, "rater_id": "finisher", "level": 0.5},
            )
        resp = requests.get(f"{base}/api/pairs/next", params={"rater": "finisher"}).json()
        assert resp["done"] is True
        assert resp["remaining"] == 0

    def test_concurrent_submissions(self, live_service, suite):
        base, _ = live_service
        image_id = suite[3].id

        def submit(i):
            requests.post(
                f"{base}/api/ratings",
                json={"image_id": image_id, "rater_id": f"c{i}", "level": round((i % 10) / 10, 1)},
            )

        threads = [threading.Thread(target=submit, args=(i,)) for i in range(12)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        resp = requests.get(f"{base}/api/images/{image_id}/aggregate")
        assert resp.json()["count"] == 12
