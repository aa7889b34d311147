import json
import math

import numpy as np
import pytest

from kpgaze.dataset import (
    admit,
    dumps_record,
    file_digest,
    from_openpose,
    read_openpose_frame,
    read_records,
    record_from_dict,
    write_records,
)
from kpgaze.errors import ValidationError
from kpgaze.evaluation import evaluate_predictions
from kpgaze.features import PersonDetections
from kpgaze.network import init_weights
from kpgaze.predict import join_predictions, predict_records, read_predictions, write_predictions


def doc(**over):
    base = {
        "frame": "1", "camera": "c", "person": "0",
        "keypoints": [[100, 100, 0.9], [90, 90, 0.8], [110, 90, 0.8], [0, 0, 0], [0, 0, 0]],
        "gaze": [1, 0],
    }
    base.update(over)
    return base


class TestParsing:
    def test_round_trip(self, tmp_path):
        recs = [record_from_dict(doc()), record_from_dict(doc(frame="2", gaze=None, sequence="s1", meta={"a": 1}))]
        write_records(recs, tmp_path / "d.jsonl")
        assert read_records(tmp_path / "d.jsonl") == recs
        assert dumps_record(recs[0]) == json.dumps(json.loads(dumps_record(recs[0])), sort_keys=True)

    @pytest.mark.parametrize("c", [-0.01, 1.01, math.inf])
    def test_confidence_out_of_range(self, c):
        kp = doc()["keypoints"]
        kp[0][2] = c
        with pytest.raises(ValidationError):
            record_from_dict(doc(keypoints=kp))

    def test_missing_field(self):
        d = doc()
        del d["frame"]
        with pytest.raises(ValidationError, match="frame"):
            record_from_dict(d)

    def test_wrong_shape(self):
        with pytest.raises(ValidationError, match="keypoints"):
            record_from_dict(doc(keypoints=[[1, 2, 0.5]] * 4))

    def test_line_numbers(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(json.dumps(doc()) + "\n" + "{oops\n")
        with pytest.raises(ValidationError, match="line 2"):
            read_records(path)

    def test_gaze_and_annotation_conflict(self):
        with pytest.raises(ValidationError):
            record_from_dict(doc(annotations=[{"eye": [0, 0], "fixation": [1, 0]}]))

    def test_annotations_average(self):
        rec = record_from_dict(doc(gaze=None, annotations=[
            {"eye": [0, 0], "fixation": [1, 0]}, {"eye": [2, 0], "fixation": [2, 5]}]))
        np.testing.assert_allclose(rec.label().g, (math.sqrt(0.5),) * 2)
        np.testing.assert_allclose(rec.annotated_eye, (1, 0))

    def test_digest(self, tmp_path):
        (tmp_path / "x").write_bytes(b"abc")
        assert file_digest(tmp_path / "x") == "sha256:ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


class TestOpenPose:
    def test_body25(self, tmp_path):
        flat = np.zeros((25, 3))
        flat[0] = (10, 20, 0.9)
        flat[15] = (8, 18, 0.7)
        flat[18] = (14, 19, 0.4)
        flat[17] = (5, 5, 0.0)  # stray coordinates with zero confidence
        det = from_openpose(flat.ravel())
        assert det.keypoints.tolist() == [[10, 20, 0.9], [8, 18, 0.7], [0, 0, 0], [0, 0, 0], [14, 19, 0.4]]
        (tmp_path / "f.json").write_text(json.dumps({"people": [{"pose_keypoints_2d": flat.ravel().tolist()}]}))
        assert read_openpose_frame(tmp_path / "f.json")[0] == PersonDetections(det.keypoints, "0")

    def test_unknown_model(self):
        with pytest.raises(ValidationError):
            from_openpose(np.zeros(75), "MPI")


class TestAdmission:
    def test_too_few_keypoints_skipped(self):
        kp = [[100, 100, 0.9]] + [[0, 0, 0]] * 4
        data, skipped = admit([record_from_dict(doc()), record_from_dict(doc(frame="2", keypoints=kp))])
        assert len(data) == 1
        assert skipped == [(("c", "2", "0"), "TooFewKeypoints")]

    def test_unlabeled(self):
        data, skipped = admit([record_from_dict(doc(gaze=None))])
        assert len(data) == 0 and skipped[0][1] == "Unlabeled"
        data, _ = admit([record_from_dict(doc(gaze=None))], require_label=False)
        assert len(data) == 1


def two_person_frame():
    """Two people in one frame; the annotation belongs to the person on the right."""
    left = {"frame": "f", "camera": "c", "person": "a",
            "keypoints": [[100, 100, 0.9], [90, 90, 0.8], [110, 90, 0.8], [0, 0, 0], [0, 0, 0]]}
    right = {"frame": "f", "camera": "c", "person": "b",
             "keypoints": [[400, 100, 0.9], [390, 90, 0.8], [410, 90, 0.8], [0, 0, 0], [0, 0, 0]]}
    annot = {"frame": "f", "camera": "c", "person": "ann",
             "keypoints": [[0, 0, 0]] * 5,
             "annotations": [{"eye": [405, 92], "fixation": [405, 300]}]}
    return [record_from_dict(d) for d in (left, right, annot)]


class TestPredictAndJoin:
    def test_prediction_records(self, tmp_path):
        recs = [record_from_dict(doc()), record_from_dict(doc(frame="2", keypoints=[[1, 1, 0.5]] + [[0, 0, 0]] * 4))]
        preds = predict_records(init_weights(0), recs)
        assert preds[1]["skip"] == "TooFewKeypoints" and preds[1]["gaze"] is None
        assert math.hypot(*preds[0]["gaze"]) == pytest.approx(1.0)
        write_predictions(preds, tmp_path / "p.jsonl")
        assert read_predictions(tmp_path / "p.jsonl") == preds

    def test_geom_predictions_have_no_sigma(self):
        preds = predict_records(None, [record_from_dict(doc())], baseline="geom")
        assert preds[0]["sigma"] is None and preds[0]["gaze"] is not None

    def test_subject_matching_join(self):
        recs = two_person_frame()
        preds = predict_records(None, recs, baseline="geom")
        joined = join_predictions(preds, recs)
        assert joined.keys == [("c", "f", "b")]
        np.testing.assert_allclose(joined.labels[0], (0, 1))
        assert joined.n_total == 1

    def test_no_subject_match(self):
        recs = two_person_frame()
        far = record_from_dict({"frame": "f", "camera": "c", "person": "ann", "keypoints": [[0, 0, 0]] * 5,
                                "annotations": [{"eye": [250, 400], "fixation": [250, 0]}]})
        recs[2] = far
        joined = join_predictions(predict_records(None, recs, baseline="geom"), recs)
        assert joined.skip_counts == {"NoSubjectMatch": 1}

    def test_missing_label_counted_not_dropped(self):
        recs = [record_from_dict(doc()), record_from_dict(doc(frame="2", gaze=None))]
        preds = predict_records(init_weights(0), recs)
        joined = join_predictions(preds, recs)
        assert joined.unlabeled_keys == [("c", "2", "0")]
        report = evaluate_predictions(preds, recs)
        assert report.unlabeled_keys == [["c", "2", "0"]]
        assert report.n_estimable == 1

    def test_skips_reduce_coverage(self):
        kp = [[1, 1, 0.5]] + [[0, 0, 0]] * 4
        recs = [record_from_dict(doc()), record_from_dict(doc(frame="2", keypoints=kp))]
        report = evaluate_predictions(predict_records(init_weights(0), recs), recs)
        assert report.n_total == 2 and report.n_estimable == 1 and report.coverage == 0.5
        assert report.skipped == {"TooFewKeypoints": 1}
