from dataclasses import replace

import numpy as np
import pytest

from agnomap import mapper, pipeline, pnm, refiner
from agnomap.errors import ConfigError, InputError

from conftest import tiny_net
from test_mapper import toy_data


def tiny_cfg(K=5, iterations=5, cycles=2, eta=1.0):
    return pipeline.PipelineConfig(mapper.MapperConfig(b=4, K=K, eta=eta),
                                   refiner.RefineConfig(iterations=iterations, eta=eta, b=4), cycles)


class TestDriver:
    def test_no_op_chain_gives_zero_map(self):
        out = pipeline.visualize_concept(tiny_net(), toy_data(), 1, tiny_cfg(K=0, iterations=0, cycles=1), 0)
        assert out.nu.shape == (6, 6, 1) and not out.nu.any()
        assert out.concept == 1

    def test_refine_output_seeds_next_cycle(self, monkeypatch):
        seeds, outputs = [], []
        real_mapper, real_refine = pipeline.run_mapper, pipeline.refine

        def spy_mapper(model, ds, label, cfg, seed_map):
            seeds.append(seed_map.nu.copy())
            return real_mapper(model, ds, label, cfg, seed_map)

        def spy_refine(model, ds, smap, cfg):
            out = real_refine(model, ds, smap, cfg)
            outputs.append(out.nu.copy())
            return out

        monkeypatch.setattr(pipeline, "run_mapper", spy_mapper)
        monkeypatch.setattr(pipeline, "refine", spy_refine)
        cfg = tiny_cfg(cycles=3, eta=0.8)
        final = pipeline.visualize_concept(tiny_net(1), toy_data(20), 0, cfg, 4)
        assert not seeds[0].any()
        for seed, prev in zip(seeds[1:], outputs):
            np.testing.assert_array_equal(seed, prev)
        for seed in seeds:
            assert np.linalg.norm(seed) <= 0.8 + 1e-5
        np.testing.assert_array_equal(final.nu, outputs[-1])

    def test_deterministic_per_seed(self):
        a = pipeline.visualize_concept(tiny_net(2), toy_data(20), 2, tiny_cfg(), 7)
        b = pipeline.visualize_concept(tiny_net(2), toy_data(20), 2, tiny_cfg(), 7)
        assert a.nu.tobytes() == b.nu.tobytes()

    def test_stage_seeds_distinct(self):
        seeds = {pipeline.stage_seed(r, c, s) for r in range(3) for c in range(3) for s in range(2)}
        assert len(seeds) == 18

    def test_round_stats(self):
        run = pipeline.run_pipeline(tiny_net(3), toy_data(20), 1, tiny_cfg(cycles=2, eta=0.5), 0)
        assert [r.cycle for r in run.rounds] == [0, 1]
        for r in run.rounds:
            assert r.norm_after_mapper <= 0.5 + 1e-5 and r.norm_after_refine <= 0.5 + 1e-5

    def test_validation(self):
        with pytest.raises(ConfigError):
            tiny_cfg(cycles=0).validate()
        bad = tiny_cfg()
        bad.refine = replace(bad.refine, eta=2.0)
        with pytest.raises(ConfigError, match="eta"):
            bad.validate()
        with pytest.raises(InputError):
            pipeline.visualize_concept(tiny_net(), toy_data(), 3, tiny_cfg(), 0)

    def test_profiles(self):
        full, desk = pipeline.PipelineConfig.full(), pipeline.PipelineConfig.desk()
        assert (full.mapper.b, full.mapper.K, full.mapper.eta, full.refine.iterations, full.refine.lam,
                full.cycles) == (128, 650, 30.0, 150, 50.0, 2)
        assert (desk.mapper.b, desk.mapper.K, desk.mapper.eta, desk.refine.iterations, desk.cycles) == (32, 150, 4.5, 60, 2)
        full.validate()
        desk.validate()


class TestTrainedModel:
    def test_distinct_seeds_distinct_maps_both_succeed(self, desk_runs, desk_data):
        _, test = desk_data
        a, b = desk_runs.get(1, 0).map, desk_runs.get(1, 1).map
        assert not np.array_equal(a.nu, b.nu)
        for smap in (a, b):
            assert mapper.nudge_success(desk_runs.model, test.images, smap) >= 0.9

    def test_handoff_and_suppression(self, desk_runs):
        for seed in (0, 1):
            for r in desk_runs.get(1, seed).rounds:
                assert r.norm_after_refine <= 4.5 + 1e-5
                assert r.low_xi_after <= r.low_xi_before


class TestExport:
    def test_constant_map_is_mid_grey(self, tmp_path):
        path = pipeline.export_map(mapper.SaliencyMap(np.full((4, 4, 3), 0.3), 0, 1.0), tmp_path / "c.ppm")
        assert (pnm.read(path) == 128).all()

    def test_p6_and_quantization_bound(self, tmp_path):
        nu = np.random.default_rng(0).normal(size=(8, 8, 3)).astype(np.float32)
        path = pipeline.export_map(mapper.SaliencyMap(nu, 0, 10.0), tmp_path / "m.ppm")
        assert path.read_bytes()[:2] == b"P6"
        back = pnm.read_float(path)
        assert np.abs(back - pipeline.display_image(nu)).max() <= 1 / 255

    def test_display_image_range(self):
        img = pipeline.display_image(np.array([[-2.0, 0.0], [1.0, 2.0]]))
        np.testing.assert_allclose(img, [[0, 0.5], [0.75, 1]])

    def test_side_by_side(self, tmp_path):
        ref = np.zeros((8, 8, 3), np.float32)
        path = pipeline.export_map(mapper.SaliencyMap(np.ones((8, 8, 3)), 0, 30.0), tmp_path / "s.ppm", ref)
        assert pnm.read(path).shape == (8, 18, 3)
        with pytest.raises(InputError):
            pipeline.export_map(mapper.SaliencyMap(np.ones((8, 8, 3)), 0, 30.0), tmp_path / "t.ppm", ref[:4])

    def test_store_run_layout(self, tmp_path):
        smap = mapper.SaliencyMap(np.random.default_rng(1).normal(size=(8, 8, 3)), 2, 4.5, 300)
        paths = pipeline.store_run(tmp_path, "clean", smap, pipeline.PipelineConfig.desk(), 5, 0.9375)
        d = tmp_path / "maps" / "clean" / "2"
        assert paths == {"image": d / "5.ppm", "map": d / "5.map", "meta": d / "5.meta.txt"}
        meta = pipeline.read_meta(paths["meta"])
        assert meta == {"concept": "2", "cycles": "2", "K": "150", "b": "32", "eta": "4.5", "lambda": "50.0",
                        "refine_iterations": "60", "seed": "5", "final_score": "0.937500"}
        assert mapper.load_map(paths["map"]).nu.tobytes() == smap.nu.tobytes()
