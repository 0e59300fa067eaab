import json
import struct
import subprocess
import sys

import numpy as np
import pytest

ECHO_CMD = [sys.executable, "-m", "stless_sims", "echo", "--steps", "2", "--channels", "2"]
UNICYCLE_CMD = [sys.executable, "-m", "stless_sims", "unicycle", "--steps", "10"]


class Child:
    def __init__(self, cmd):
        self.proc = subprocess.Popen(
            cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
        )
        self.hello = json.loads(self.proc.stdout.readline())

    def request(self, payload: dict) -> dict:
        self.proc.stdin.write(json.dumps(payload) + "\n")
        self.proc.stdin.flush()
        return json.loads(self.proc.stdout.readline())

    def close(self):
        self.proc.stdin.close()
        self.proc.wait(timeout=5)


@pytest.fixture(params=[ECHO_CMD, UNICYCLE_CMD], ids=["echo", "unicycle"])
def child(request):
    c = Child(request.param)
    yield c
    c.close()


class TestHandshake:
    def test_hello_fields(self, child):
        hello = child.hello
        assert hello["type"] == "hello"
        assert hello["l"] >= 1
        assert len(hello["channels"]) >= 1
        assert hello["horizon"] >= 1
        assert hello["serial"] is True


class TestProtocolConformance:
    def test_fuzz_1000_requests(self, child):
        rng = np.random.default_rng(0)
        l = child.hello["l"]
        horizon = child.hello["horizon"]
        q = len(child.hello["channels"])
        for i in range(1000):
            w = rng.standard_normal(l) * float(rng.uniform(0.1, 3.0))
            response = child.request({"type": "run", "id": i, "w": [float(v) for v in w]})
            assert response["type"] == "signal"
            assert response["id"] == i
            y = np.asarray(response["y"], dtype=float)
            assert y.shape == (horizon, q)
            assert np.all(np.isfinite(y))

    def test_length_mismatch_is_error(self, child):
        response = child.request({"type": "run", "id": 7, "w": [0.0] * (child.hello["l"] + 1)})
        assert response["type"] == "error"
        assert response["id"] == 7
        assert response["message"]

    def test_unknown_type_is_error(self, child):
        response = child.request({"type": "noodle", "id": 8})
        assert response["type"] == "error"
        assert response["id"] == 8

    def test_malformed_json_is_error(self, child):
        child.proc.stdin.write("{nonsense\n")
        child.proc.stdin.flush()
        response = json.loads(child.proc.stdout.readline())
        assert response["type"] == "error"
        assert response["id"] == -1

    def test_determinism(self, child):
        rng = np.random.default_rng(1)
        w = [float(v) for v in rng.standard_normal(child.hello["l"])]
        first = child.request({"type": "run", "id": 0, "w": w})
        second = child.request({"type": "run", "id": 1, "w": w})
        assert first["y"] == second["y"]


class TestFloatFidelity:
    def test_echo_round_trips_bits(self):
        child = Child(ECHO_CMD)
        try:
            values = [0.1, -1.0 / 3.0, 1e-300, 123456789.123456789]
            response = child.request({"type": "run", "id": 0, "w": values})
            got = [v for row in response["y"] for v in row]
            for sent, back in zip(values, got):
                assert struct.pack("<d", sent) == struct.pack("<d", back)
        finally:
            child.close()
