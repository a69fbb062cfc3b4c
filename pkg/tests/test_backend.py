"""Backend selection, kernel cross-agreement, and the benchmark harness."""
import numpy as np
import pytest

from rpfem import kernels
from rpfem.backend import active_backend, numba_available, requested_backend, thread_count
from rpfem.bench import format_rows, run_benchmark
from rpfem.errors import ConfigError
from rpfem.rng import SplitRng


class TestSelection:
    def test_invalid_backend_name_rejected(self, monkeypatch):
        monkeypatch.setenv("RPFEM_BACKEND", "cuda")
        with pytest.raises(ConfigError, match="RPFEM_BACKEND"):
            requested_backend()

    def test_numpy_can_be_forced(self, monkeypatch):
        monkeypatch.setenv("RPFEM_BACKEND", "numpy")
        assert active_backend() == "numpy"

    def test_auto_resolves(self, monkeypatch):
        monkeypatch.delenv("RPFEM_BACKEND", raising=False)
        assert active_backend() in ("numba", "numpy")

    def test_thread_count_validation(self, monkeypatch):
        monkeypatch.setenv("RPFEM_THREADS", "0")
        with pytest.raises(ConfigError):
            thread_count()
        monkeypatch.setenv("RPFEM_THREADS", "abc")
        with pytest.raises(ConfigError):
            thread_count()
        monkeypatch.setenv("RPFEM_THREADS", "4")
        assert thread_count() == 4


@pytest.mark.skipif(not numba_available(), reason="numba not importable")
class TestKernelAgreement:
    def _attn_case(self, seed):
        rng = SplitRng(seed)
        q = rng.child("q").normal((17, 6))
        kk = rng.child("k").normal((9, 6))
        v = rng.child("v").normal((9, 5))
        du = rng.child("du").normal((17, 5))
        return q, kk, v, du

    @pytest.mark.parametrize("seed", range(3))
    def test_attention_forward_and_backward_agree(self, seed):
        q, kk, v, du = self._attn_case(seed)
        scl = 1.0 / np.sqrt(q.shape[1])
        u_np = kernels._attn_forward_numpy(q, kk, v, scl)
        u_nb = kernels._attn_forward_numba(q, kk, v, scl)
        assert np.abs(u_np - u_nb).max() <= 1e-12
        for a, b in zip(
            kernels._attn_backward_numpy(q, kk, v, du, scl),
            kernels._attn_backward_numba(q, kk, v, du, scl),
        ):
            assert np.abs(a - b).max() <= 1e-12

    @pytest.mark.parametrize("seed", range(3))
    def test_pair_geometry_bitwise_identical(self, seed):
        rng = SplitRng(seed + 10)
        n, c = 7, 4
        cls = rng.child("c").integers(0, c, n).astype(np.int64)
        cx = rng.child("x").uniform(0, 300, n)
        cy = rng.child("y").uniform(0, 400, n)
        bw = rng.child("w").uniform(5, 40, n)
        bh = rng.child("h").uniform(5, 40, n)
        bx, by = cx - bw / 2, cy - bh / 2
        o1, c1 = np.zeros((c, c, 5)), np.zeros((c, c))
        o2, c2 = np.zeros((c, c, 5)), np.zeros((c, c))
        pa1, pb1, d1 = kernels._pair_geometry_numpy(cls, cx, cy, bx, by, bw, bh, 0.002, o1, c1)
        pa2, pb2, d2 = kernels._pair_geometry_numba(cls, cx, cy, bx, by, bw, bh, 0.002, o2, c2)
        assert np.array_equal(o1, o2)
        assert np.array_equal(c1, c2)
        assert np.array_equal(np.sort(d1), np.sort(d2))
        assert sorted(zip(pa1.tolist(), pb1.tolist(), d1.tolist())) == sorted(
            zip(pa2.tolist(), pb2.tolist(), d2.tolist())
        )


class TestBenchmark:
    def test_rows_cover_both_kernels(self):
        rows = run_benchmark(repeats=1)
        kinds = {r.kernel for r in rows}
        assert kinds == {"pair_attention", "pair_geometry"}
        for r in rows:
            assert r.numpy_ms > 0
            if numba_available():
                assert r.numba_ms is not None and r.numba_ms > 0

    def test_format_is_tabular(self):
        rows = run_benchmark(repeats=1)
        text = format_rows(rows)
        assert "pair_attention" in text and "speedup" in text
