import numpy as np
import pytest

from rtlab import data, models, supervised
from rtlab.errors import ConfigError, ContractError, DivergenceError, DomainError
from rtlab.params import ParamVector, build_layout
from rtlab.supervised import (
    PruneMask,
    SupervisedConfig,
    classifier_layout,
    global_magnitude_prune,
    imp_run,
    lmc_experiment,
    make_classifier_init,
    pruning_rate,
    supervised_train,
)


def tiny_spec(norm="layer"):
    return models.ModelSpec(
        encoder_kind="mlp", encoder_widths=(12,), embed_dim=6, norm_kind=norm,
        input_shape=(8,),
    )


def tiny_config(norm="layer", **over):
    base = dict(epochs=4, milestones=(2, 3), lr0=0.05, batch_size=32,
                rewind_epochs=(0, 1), ordering_seed=7)
    base.update(over)
    return SupervisedConfig(tiny_spec(norm), 4, **base)


def blob_splits(seed=0, n_train=192, n_test=96, sep=6.0):
    return data.make_blob_splits(n_train, n_test, 8, 4, sep, seed=seed)


def weight_vec(values):
    arr = np.asarray(values, dtype=np.float64)
    layout = build_layout([("head.w", arr.shape, "weight")])
    return ParamVector(arr, layout)


class TestPruningRate:
    def test_matches_geometric_sum(self):
        for k in (0.2, 0.5, 0.37):
            for r in range(0, 11):
                expected = sum((1 - k) ** i * k for i in range(r))
                assert abs(pruning_rate(k, r) - expected) < 1e-10

    def test_round_zero_is_dense(self):
        assert pruning_rate(0.2, 0) == 0.0

    def test_domain(self):
        with pytest.raises(DomainError):
            pruning_rate(0.0, 3)
        with pytest.raises(DomainError):
            pruning_rate(1.0, 3)
        with pytest.raises(DomainError):
            pruning_rate(0.2, -1)


class TestGlobalMagnitudePrune:
    def test_hand_example(self):
        theta = weight_vec([0.1, -0.5, 0.3, -0.05])
        mask = PruneMask.fresh(theta.layout)
        new = global_magnitude_prune(theta, mask, 0.5)
        assert np.array_equal(new.flags, [0.0, 1.0, 1.0, 0.0])
        assert new.round == 1
        assert new.sparsity == 0.5

    def test_ties_prune_lowest_index(self):
        theta = weight_vec([0.2, 0.2, 0.2, 0.2])
        new = global_magnitude_prune(theta, PruneMask.fresh(theta.layout), 0.5)
        assert np.array_equal(new.flags, [0.0, 0.0, 1.0, 1.0])

    def test_floor_rounding(self):
        theta = weight_vec(np.linspace(1.0, 5.0, 5))
        new = global_magnitude_prune(theta, PruneMask.fresh(theta.layout), 0.3)
        # floor(0.3 * 5) = 1
        assert new.flags.sum() == 4.0

    def test_two_rounds_of_twenty_percent_on_hundred(self):
        theta = weight_vec(np.arange(1.0, 101.0))
        mask = PruneMask.fresh(theta.layout)
        mask = global_magnitude_prune(theta, mask, 0.2)
        assert (mask.flags == 0.0).sum() == 20
        mask = global_magnitude_prune(theta, mask, 0.2)
        assert (mask.flags == 0.0).sum() == 36
        assert abs(mask.sparsity - pruning_rate(0.2, 2)) < 1e-12

    def test_masks_monotone_and_ignore_masked_values(self):
        rng = np.random.default_rng(3)
        theta = weight_vec(rng.normal(size=64))
        mask = PruneMask.fresh(theta.layout)
        for _ in range(4):
            new = global_magnitude_prune(theta, mask, 0.25)
            # never resurrects an entry
            assert np.all(new.flags <= mask.flags)
            mask = new

    def test_biases_and_norm_params_never_pruned(self):
        layout = build_layout([
            ("enc.lin0.w", (3, 2), "weight"),
            ("enc.lin0.b", (2,), "bias"),
            ("enc.norm0.gamma", (2,), "norm"),
        ])
        theta = ParamVector(np.full(10, 1e-9), layout)
        theta.segment("enc.lin0.w")[...] = [[4.0, 5.0], [6.0, 1.0], [2.0, 3.0]]
        mask = global_magnitude_prune(theta, PruneMask.fresh(layout), 0.5)
        assert np.array_equal(mask.flags[:6], [1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
        assert np.all(mask.flags[6:] == 1.0)

    def test_fully_pruned_raises(self):
        theta = weight_vec([1.0, 2.0])
        mask = PruneMask.fresh(theta.layout)
        mask.flags[:] = 0.0
        with pytest.raises(DomainError):
            global_magnitude_prune(theta, mask, 0.5)

    def test_k_domain(self):
        theta = weight_vec([1.0, 2.0])
        with pytest.raises(DomainError):
            global_magnitude_prune(theta, PruneMask.fresh(theta.layout), 1.0)


class TestConfig:
    def test_milestones_must_increase(self):
        with pytest.raises(ConfigError):
            tiny_config(milestones=(3, 2))

    def test_milestones_before_end(self):
        with pytest.raises(ConfigError):
            tiny_config(milestones=(2, 4), epochs=4)

    def test_lr_schedule_values(self):
        cfg = SupervisedConfig(tiny_spec(), 4, epochs=160, milestones=(80, 120))
        assert cfg.lr_at(0) == 0.1
        assert cfg.lr_at(79) == 0.1
        assert abs(cfg.lr_at(80) - 0.01) < 1e-15
        assert abs(cfg.lr_at(120) - 0.001) < 1e-15

    def test_desk_scale_defaults(self):
        cfg = SupervisedConfig.desk_scale(tiny_spec(), 4)
        assert cfg.epochs == 40
        assert cfg.milestones == (20, 30)
        assert cfg.lr0 == 0.1 and cfg.momentum == 0.9 and cfg.weight_decay == 1e-4

    def test_unknown_augmentation(self):
        with pytest.raises(ConfigError):
            tiny_config(augmentation="cutout")


class TestClassifierInit:
    def test_layout_has_head(self):
        layout = classifier_layout(tiny_spec(), 4)
        names = [seg.name for seg in layout]
        assert "head.w" in names and "head.b" in names
        head = [seg for seg in layout if seg.name == "head.w"][0]
        assert head.shape == (6, 4) and head.tag == "weight"

    def test_transplant_copies_encoder(self):
        spec = tiny_spec()
        source = models.init_params(spec, seed=11).params
        pv = make_classifier_init(spec, 4, seed=0, encoder_from=source)
        for seg, arr in pv.segments():
            if seg.name.startswith("enc."):
                assert np.array_equal(arr, source.segment(seg.name))
        assert np.any(pv.segment("head.w") != 0.0)

    def test_deterministic(self):
        a = make_classifier_init(tiny_spec(), 4, seed=5)
        b = make_classifier_init(tiny_spec(), 4, seed=5)
        assert np.array_equal(a.values, b.values)


class TestSupervisedTrain:
    def test_deterministic_bit_identical(self):
        train, _ = blob_splits()
        init = make_classifier_init(tiny_spec(), 4, seed=1)
        cfg = tiny_config()
        r1 = supervised_train(init, cfg, train)
        r2 = supervised_train(init, cfg, train)
        assert np.array_equal(r1.theta_star.values, r2.theta_star.values)
        assert r1.losses == r2.losses

    def test_zero_lr_leaves_init_unchanged(self):
        train, _ = blob_splits()
        init = make_classifier_init(tiny_spec(), 4, seed=1)
        res = supervised_train(init, tiny_config(lr0=0.0), train)
        assert np.array_equal(res.theta_star.values, init.values)

    def test_checkpoint_zero_is_init(self):
        train, _ = blob_splits()
        init = make_classifier_init(tiny_spec(), 4, seed=1)
        res = supervised_train(init, tiny_config(), train)
        assert np.array_equal(res.checkpoints[0].values, init.values)
        assert set(res.checkpoints) == {0, 1}

    def test_rewind_checkpoint_reproducible(self):
        # restarting from the epoch-1 checkpoint with the same ordering seed
        # must retrace epochs 1..3 exactly
        train, _ = blob_splits()
        init = make_classifier_init(tiny_spec(), 4, seed=1)
        cfg = tiny_config()
        full = supervised_train(init, cfg, train)
        ck = full.checkpoints[1]
        resumed = supervised_train(ck, tiny_config(epochs=1, milestones=(), rewind_epochs=(0,), lr0=cfg.lr0), train)
        # one epoch from the epoch-1 checkpoint is NOT epoch 2 of the full
        # run (momentum resets), but the checkpoint itself must be exact:
        refull = supervised_train(init, cfg, train)
        assert np.array_equal(refull.checkpoints[1].values, ck.values)
        assert resumed.theta_star.values.shape == ck.values.shape

    def test_training_improves_running_accuracy(self):
        train, _ = blob_splits(sep=8.0)
        init = make_classifier_init(tiny_spec(), 4, seed=2)
        res = supervised_train(init, tiny_config(epochs=6, milestones=(4,)), train)
        assert res.train_accuracy[-1] > res.train_accuracy[0]

    def test_masked_entries_stay_exactly_zero(self):
        train, _ = blob_splits()
        spec = tiny_spec()
        init = make_classifier_init(spec, 4, seed=3)
        mask = PruneMask.fresh(init.layout)
        rng = np.random.default_rng(0)
        p = mask.prunable_index()
        mask.flags[rng.choice(p, size=p.size // 2, replace=False)] = 0.0
        res = supervised_train(init, tiny_config(), train, mask)
        assert np.all(res.theta_star.values[mask.flags == 0.0] == 0.0)
        # unmasked coordinates actually trained
        moved = res.theta_star.values != init.masked(mask.flags).values
        assert moved[mask.flags == 1.0].any()

    def test_layout_mismatch_rejected(self):
        train, _ = blob_splits()
        bad = weight_vec([1.0, 2.0])
        with pytest.raises(ContractError):
            supervised_train(bad, tiny_config(), train)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_preserves_last_params(self):
        train, _ = blob_splits()
        init = make_classifier_init(tiny_spec(), 4, seed=1)
        with pytest.raises(DivergenceError) as exc:
            supervised_train(init, tiny_config(lr0=1e150, weight_decay=0.0), train)
        assert exc.value.last_params is not None
        assert np.all(np.isfinite(exc.value.last_params.values))

    def test_ordering_seed_changes_trajectory(self):
        train, _ = blob_splits()
        init = make_classifier_init(tiny_spec(), 4, seed=1)
        a = supervised_train(init, tiny_config(ordering_seed=1), train)
        b = supervised_train(init, tiny_config(ordering_seed=2), train)
        assert not np.array_equal(a.theta_star.values, b.theta_star.values)

    def test_augmentation_requires_images(self):
        train, _ = blob_splits()
        init = make_classifier_init(tiny_spec(), 4, seed=1)
        with pytest.raises(ContractError):
            supervised_train(init, tiny_config(augmentation="flip_padcrop4"), train)

    def test_augmented_image_run_differs_from_plain(self):
        rng = np.random.default_rng(0)
        n = 64
        images = rng.normal(size=(n, 1, 8, 8))
        labels = rng.integers(0, 4, size=n)
        ds = data.Dataset(images, labels, k=4)
        spec = models.ModelSpec(encoder_kind="mlp", encoder_widths=(12,), embed_dim=6,
                                norm_kind="layer", input_shape=(1, 8, 8))
        init = make_classifier_init(spec, 4, seed=1)
        cfg = dict(epochs=2, milestones=(), lr0=0.05, batch_size=32, rewind_epochs=(0,))
        plain = supervised_train(init, SupervisedConfig(spec, 4, **cfg), ds)
        aug = supervised_train(init, SupervisedConfig(spec, 4, augmentation="flip_padcrop4", **cfg), ds)
        assert not np.array_equal(plain.theta_star.values, aug.theta_star.values)


class TestClassifierError:
    def test_error_in_unit_interval_and_deterministic(self):
        train, test = blob_splits()
        spec = tiny_spec()
        init = make_classifier_init(spec, 4, seed=1)
        res = supervised_train(init, tiny_config(epochs=6, milestones=(4,)), train)
        e1 = supervised.classifier_error(spec, res.theta_star, test, train.inputs)
        e2 = supervised.classifier_error(spec, res.theta_star, test, train.inputs)
        assert 0.0 <= e1 <= 1.0
        assert e1 == e2

    def test_trained_beats_init_on_easy_blobs(self):
        train, test = blob_splits(sep=8.0)
        spec = tiny_spec()
        init = make_classifier_init(spec, 4, seed=1)
        res = supervised_train(init, tiny_config(epochs=8, milestones=(6,)), train)
        e_init = supervised.classifier_error(spec, init, test, train.inputs)
        e_star = supervised.classifier_error(spec, res.theta_star, test, train.inputs)
        assert e_star < e_init


class TestImpRun:
    def test_rounds_zero_gives_dense_only(self):
        train, test = blob_splits()
        init = make_classifier_init(tiny_spec(), 4, seed=1)
        records = imp_run(init, 0, 0.2, tiny_config(), train, test)
        assert len(records) == 1
        assert records[0]["round"] == 0 and records[0]["sparsity"] == 0.0

    def test_sparsity_schedule(self):
        train, test = blob_splits()
        init = make_classifier_init(tiny_spec(), 4, seed=1)
        records = imp_run(init, 3, 0.2, tiny_config(epochs=2, milestones=()), train, test)
        n_prunable = records[0]["mask"].prunable_index().size
        alive = n_prunable
        for rec in records:
            # exact floor recursion; the closed form is matched to within one
            # quantization step per round
            assert rec["sparsity"] == (n_prunable - alive) / n_prunable
            closed = pruning_rate(0.2, rec["round"])
            assert abs(rec["sparsity"] - closed) <= rec["round"] / n_prunable + 1e-12
            alive -= int(np.floor(0.2 * alive))
        for a, b in zip(records, records[1:]):
            assert np.all(b["mask"].flags <= a["mask"].flags)

    def test_negative_rounds_rejected(self):
        train, test = blob_splits()
        init = make_classifier_init(tiny_spec(), 4, seed=1)
        with pytest.raises(ContractError):
            imp_run(init, -1, 0.2, tiny_config(), train, test)


class TestLmc:
    def test_identical_solutions_have_zero_barrier(self):
        from rtlab.landscape import path_barrier

        train, test = blob_splits()
        spec = tiny_spec()
        init = make_classifier_init(spec, 4, seed=1)
        cfg = tiny_config(epochs=3, milestones=(2,))
        star = supervised_train(init, cfg, train).theta_star

        def err(pv):
            return supervised.classifier_error(spec, pv, test, train.inputs)

        curve, barrier = path_barrier(star, star, 5, err)
        assert barrier == 0.0
        assert len({v for _, v in curve}) == 1

    def test_pairs_and_endpoint_consistency(self):
        train, test = blob_splits()
        cfg = tiny_config(epochs=3, milestones=(2,))
        init = make_classifier_init(tiny_spec(), 4, seed=1)
        res = lmc_experiment(init, 3, 5, cfg, train, test)
        assert len(res.curves) == 3 and len(res.barriers) == 3
        assert len(res.orderings) == len(set(res.orderings)) == 3
        for (i, j, curve) in res.curves:
            # gamma=0 sits at run j, gamma=1 at run i
            assert abs(curve[0][1] - res.endpoint_errors[j]) < 1e-12
            assert abs(curve[-1][1] - res.endpoint_errors[i]) < 1e-12
        assert res.mean_barrier >= 0.0
        assert res.std_barrier >= 0.0

    def test_explicit_identical_orderings_zero_barrier(self):
        train, test = blob_splits()
        cfg = tiny_config(epochs=2, milestones=())
        init = make_classifier_init(tiny_spec(), 4, seed=1)
        res = lmc_experiment(init, 2, 5, cfg, train, test, orderings=[9, 9])
        assert res.endpoint_errors[0] == res.endpoint_errors[1]
        assert res.barriers[0][2] == 0.0

    def test_needs_two_orderings(self):
        train, test = blob_splits()
        init = make_classifier_init(tiny_spec(), 4, seed=1)
        with pytest.raises(ContractError):
            lmc_experiment(init, 1, 5, tiny_config(), train, test)


class TestImpRecordsBnFlag:
    def test_flag_present(self):
        train, test = blob_splits()
        spec = tiny_spec(norm="batch")
        init = make_classifier_init(spec, 4, seed=1)
        cfg = SupervisedConfig(spec, 4, epochs=1, milestones=(), lr0=0.05,
                               batch_size=64, rewind_epochs=(0,))
        records = imp_run(init, 1, 0.2, cfg, train, test)
        assert all(rec["bn_stats_reset"] for rec in records)
