"""Training-loop tests: sampler contracts, LR schedule, Adam, resume."""

import numpy as np
import pytest

from mlareid.backbone import BackboneConfig, named_entries
from mlareid.checkpoint import load_checkpoint
from mlareid.clustering import PseudoLabels
from mlareid.dataio import SynthSpec, synth_generate
from mlareid.errors import ConfigError, ContractError, EpochSkip
from mlareid.autodiff import Parameter
from mlareid.pipeline import (
    REPORT_HEADER,
    AdamState,
    TrainConfig,
    adam_step,
    apply_config_lines,
    lr_at,
    parse_config,
    pk_sampler,
    run_training,
)


def labels_of(raw) -> PseudoLabels:
    raw = np.asarray(raw)
    return PseudoLabels(labels=raw, k=int(raw.max()) + 1 if (raw >= 0).any() else 0)


def tiny_backbone(mode: str) -> BackboneConfig:
    return BackboneConfig(
        input_hw=(16, 16),
        stage_channels=(4, 8),
        blocks_per_stage=(1, 1),
        embed_dim=4,
        attention_mode=mode,
        heads=2,
    )


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    """A small dataset plus an eps known to give the sampler enough clusters."""
    root = tmp_path_factory.mktemp("pipe")
    spec = SynthSpec(
        num_ids=6, images_per_id=6, num_cameras=2, image_hw=(16, 16),
        background_strength=0.6, seed=11,
    )
    synth_generate(spec, root / "data")

    from mlareid.backbone import build_backbone
    from mlareid.clustering import dbscan, pairwise_cosine_distance
    from mlareid.dataio import load_dataset, stack_pixels
    from mlareid.pipeline import bn_warmup, extract_all_features

    pixels = stack_pixels([r for r in load_dataset(root / "data") if r.split == "train"])
    params = build_backbone(tiny_backbone("all"), 0)
    bn_warmup(params, pixels, 2)
    dist = pairwise_cosine_distance(extract_all_features(pixels, params))
    eps = next(
        e for e in (0.002, 0.003, 0.005, 0.008, 0.012, 0.02, 0.03, 0.05)
        if dbscan(dist, e, 2).k >= 2
    )
    return root / "data", eps


class TestPkSampler:
    def test_exact_fit_single_batch(self):
        """2 clusters of 4 with P=2, K=4 fit one batch holding all 8 samples."""
        pl = labels_of([0, 0, 0, 0, 1, 1, 1, 1])
        batches = pk_sampler(pl, p=2, k_img=4, seed=0)
        assert len(batches) == 1
        assert sorted(batches[0].tolist()) == list(range(8))

    def test_replacement_fills_small_cluster(self):
        """A 2-member cluster still contributes K_img slots, each member once."""
        pl = labels_of([0, 0, 1, 1, 1, 1])
        batches = pk_sampler(pl, p=2, k_img=4, seed=3)
        (batch,) = batches
        small = [i for i in batch if i in (0, 1)]
        assert len(small) == 4
        assert set(small) == {0, 1}

    def test_batch_shape_contract(self):
        """Every batch holds exactly P distinct clusters times K_img samples."""
        rng = np.random.default_rng(0)
        raw = rng.integers(-1, 7, size=60)
        pl = labels_of(raw)
        for batch in pk_sampler(pl, p=3, k_img=2, seed=5):
            assert batch.size == 6
            cids = raw[batch]
            assert len(np.unique(cids)) == 3

    def test_noise_never_sampled(self):
        raw = np.array([0, 0, 0, -1, -1, 1, 1, 1, -1, 2, 2, 2])
        pl = labels_of(raw)
        for batch in pk_sampler(pl, p=2, k_img=3, seed=9):
            assert (raw[batch] >= 0).all()

    def test_epoch_covers_every_cluster(self):
        rng = np.random.default_rng(4)
        raw = rng.integers(0, 9, size=80)
        pl = labels_of(raw)
        seen = set()
        for batch in pk_sampler(pl, p=4, k_img=2, seed=2):
            seen.update(raw[batch].tolist())
        assert seen == set(range(9))

    def test_seeded_replay_identical(self):
        raw = np.random.default_rng(7).integers(-1, 5, size=50)
        pl = labels_of(raw)
        a = pk_sampler(pl, p=2, k_img=3, seed=42)
        b = pk_sampler(pl, p=2, k_img=3, seed=42)
        assert len(a) == len(b)
        for x, y in zip(a, b):
            assert x.tobytes() == y.tobytes()

    def test_too_few_clusters_skips(self):
        pl = labels_of([0, 0, 0, 1, 1, 1])
        with pytest.raises(EpochSkip):
            pk_sampler(pl, p=3, k_img=2, seed=0)


class TestLrSchedule:
    def test_paper_values(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == 1.6e-4
        assert lr_at(20, cfg) == pytest.approx(1.6e-5, rel=1e-12)
        assert lr_at(19, cfg) == 1.6e-4

    def test_closed_form_first_hundred_epochs(self):
        cfg = TrainConfig(lr0=2.0, lr_decay=0.5, lr_decay_every=7)
        for epoch in range(101):
            assert lr_at(epoch, cfg) == 2.0 * 0.5 ** (epoch // 7)

    def test_negative_epoch_rejected(self):
        with pytest.raises(ContractError):
            lr_at(-1, TrainConfig())


class TestAdam:
    def test_single_step_hand_formula(self):
        """Fresh-state step equals -lr*g/(|g|+eps) after bias correction."""
        g = np.array([0.3, -1.2, 2.0])
        p = Parameter("w", np.array([1.0, 2.0, 3.0]))
        p.grad = g.copy()
        state = AdamState()
        adam_step([p], lr=0.1, state=state)
        expected = np.array([1.0, 2.0, 3.0]) - 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.data, expected, atol=1e-12)

    def test_zero_gradient_leaves_parameter_unchanged(self):
        p = Parameter("w", np.array([4.0, 5.0]))
        p.grad = np.zeros(2)
        adam_step([p], lr=0.1, state=AdamState())
        assert p.data.tolist() == [4.0, 5.0]

    def test_missing_gradient_counts_as_zero(self):
        p = Parameter("w", np.array([4.0]))
        p.grad = None
        adam_step([p], lr=0.1, state=AdamState())
        assert p.data.tolist() == [4.0]

    def test_constant_gradient_step_approaches_lr(self):
        """With constant g the bias-corrected step tends to lr*sign(g)."""
        p = Parameter("w", np.array([0.0]))
        state = AdamState()
        for _ in range(400):
            p.grad = np.array([0.5])
            before = p.data.copy()
            adam_step([p], lr=1e-3, state=state)
        step = before - p.data
        np.testing.assert_allclose(step, [1e-3], rtol=1e-3)

    def test_two_steps_match_manual_recurrence(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        grads = [np.array([0.7, -0.2]), np.array([-0.1, 0.4])]
        p = Parameter("w", np.zeros(2))
        state = AdamState()
        m = np.zeros(2)
        v = np.zeros(2)
        ref = np.zeros(2)
        for t, g in enumerate(grads, start=1):
            p.grad = g.copy()
            adam_step([p], lr=lr, state=state)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref = ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        np.testing.assert_allclose(p.data, ref, atol=1e-15)


class TestConfig:
    def test_defaults_validate(self):
        TrainConfig().validate()

    def test_parse_overrides_and_types(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text(
            "clustering_iterations = 3\n"
            "lr0 = 0.004\n"
            "# a comment line\n"
            "\n"
            "attention_mode = hla\n"
            "augment = true\n"
        )
        cfg = parse_config(path)
        assert cfg.clustering_iterations == 3
        assert cfg.lr0 == 0.004
        assert cfg.attention_mode == "hla"
        assert cfg.augment is True
        assert cfg.batch_p == 4  # untouched default

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("learning_rate = 0.1\n")
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config(path)

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            apply_config_lines(TrainConfig(), ["min_pts = four"])

    def test_invalid_combinations_rejected(self):
        for line in ("batch_p = 1\nbatch_k = 1", "tau = 0", "mu = 1.5", "attention_mode = cnn"):
            with pytest.raises(ConfigError):
                apply_config_lines(TrainConfig(), line.splitlines())

    def test_echo_lines_roundtrip(self):
        cfg = TrainConfig(lr0=3e-4, attention_mode="dla", augment=True)
        assert apply_config_lines(TrainConfig(), cfg.echo_lines()) == cfg


class TestRunTraining:
    def desk_cfg(self, eps, mode="all", iters=2, seed=0):
        return TrainConfig(
            clustering_iterations=iters, batch_p=2, batch_k=2, lr0=8e-4,
            eps=eps, min_pts=2, seed=seed, attention_mode=mode, bn_warmup_passes=2,
        )

    def test_zero_iterations_emits_initial_checkpoint(self, tiny_dataset, tmp_path):
        data, eps = tiny_dataset
        cfg = self.desk_cfg(eps, iters=0)
        ck, reports = run_training(cfg, data, tmp_path / "r",
                                   backbone_cfg=tiny_backbone("all"))
        assert reports == []
        entries = load_checkpoint(ck)
        from mlareid.backbone import build_backbone
        fresh = named_entries(build_backbone(tiny_backbone("all"), 0))
        for name, value in fresh.items():
            assert entries[name].tobytes() == value.tobytes()

    def test_first_iteration_takes_optimizer_steps(self, tiny_dataset, tmp_path):
        data, eps = tiny_dataset
        cfg = self.desk_cfg(eps, iters=1)
        ck, reports = run_training(cfg, data, tmp_path / "r",
                                   backbone_cfg=tiny_backbone("all"))
        assert not reports[0].skipped
        assert reports[0].k >= 2
        assert int(load_checkpoint(ck)["optim.t"]) >= 1

    def test_report_csv_layout(self, tiny_dataset, tmp_path):
        data, eps = tiny_dataset
        cfg = self.desk_cfg(eps, iters=2)
        run_training(cfg, data, tmp_path / "r", backbone_cfg=tiny_backbone("all"))
        lines = (tmp_path / "r" / "report.csv").read_text().splitlines()
        assert lines[0] == REPORT_HEADER
        assert len(lines) == 3
        first = lines[1].split(",")
        assert first[0] == "0" and len(first) == 6

    def test_two_runs_bit_identical(self, tiny_dataset, tmp_path):
        data, eps = tiny_dataset
        outs = []
        for name in ("a", "b"):
            cfg = self.desk_cfg(eps, iters=2)
            ck, reports = run_training(cfg, data, tmp_path / name,
                                       backbone_cfg=tiny_backbone("all"))
            rows = [r.csv_row().rsplit(",", 1)[0] for r in reports]  # drop seconds
            outs.append((load_checkpoint(ck), rows))
        (ca, ra), (cb, rb) = outs
        assert ra == rb
        assert set(ca) == set(cb)
        for key in ca:
            assert ca[key].tobytes() == cb[key].tobytes(), key

    def test_resume_matches_straight_run(self, tiny_dataset, tmp_path):
        data, eps = tiny_dataset
        cfg4 = self.desk_cfg(eps, iters=4)
        ck4, rep4 = run_training(cfg4, data, tmp_path / "straight",
                                 backbone_cfg=tiny_backbone("all"))
        cfg2 = self.desk_cfg(eps, iters=2)
        ck2, _ = run_training(cfg2, data, tmp_path / "half",
                              backbone_cfg=tiny_backbone("all"))
        ckr, repr_ = run_training(cfg4, data, tmp_path / "resumed",
                                  resume_from=ck2)
        tail = [r.csv_row().rsplit(",", 1)[0] for r in rep4[2:]]
        resumed = [r.csv_row().rsplit(",", 1)[0] for r in repr_]
        assert resumed == tail
        a, b = load_checkpoint(ck4), load_checkpoint(ckr)
        assert set(a) == set(b)
        for key in a:
            assert a[key].tobytes() == b[key].tobytes(), key

    def test_skip_iteration_keeps_parameters_bit_unchanged(self, tiny_dataset, tmp_path):
        """An eps tiny enough to make everything noise must train nothing."""
        data, eps = tiny_dataset
        cfg = self.desk_cfg(1e-9, iters=1)
        cfg.min_pts = 4
        ck, reports = run_training(cfg, data, tmp_path / "r",
                                   backbone_cfg=tiny_backbone("all"))
        assert reports[0].skipped
        assert reports[0].mean_loss == 0.0
        cfg0 = self.desk_cfg(eps, iters=0)
        ck0, _ = run_training(cfg0, data, tmp_path / "r0",
                              backbone_cfg=tiny_backbone("all"))
        trained = load_checkpoint(ck)
        fresh = load_checkpoint(ck0)
        # identical weights modulo the bn stats the warmup pass touched
        for key, value in fresh.items():
            if ".running_" in key or key.startswith(("pipeline.", "optim.")):
                continue
            assert trained[key].tobytes() == value.tobytes(), key

    def test_mode_mismatch_on_resume_rejected(self, tiny_dataset, tmp_path):
        data, eps = tiny_dataset
        cfg = self.desk_cfg(eps, iters=1)
        ck, _ = run_training(cfg, data, tmp_path / "r",
                             backbone_cfg=tiny_backbone("all"))
        other = self.desk_cfg(eps, mode="hla", iters=2)
        with pytest.raises(ConfigError, match="attention_mode"):
            run_training(other, data, tmp_path / "r2", resume_from=ck)

    def test_checkpoint_contains_optimizer_and_meta(self, tiny_dataset, tmp_path):
        data, eps = tiny_dataset
        cfg = self.desk_cfg(eps, iters=1)
        ck, _ = run_training(cfg, data, tmp_path / "r",
                             backbone_cfg=tiny_backbone("all"))
        entries = load_checkpoint(ck)
        assert "optim.t" in entries
        assert any(k.startswith("optim.m.") for k in entries)
        assert "meta.attention_mode" in entries
        assert int(entries["pipeline.iteration"]) == 1
