"""Layout model: forward contract, loss oracle values, greedy decoding,
training behavior and attention utilities."""

import json
import math

import numpy as np
import pytest
import torch

from sketchchat.errors import AlignmentError, ConfigError, DimensionError
from sketchchat.proposer import (
    AttentionMap,
    CompositionProposer,
    GenerationResult,
    ObjectPrediction,
    ProposerConfig,
    TrainingPair,
    attention_for_object,
    detect_unknown_object,
    evaluate_loss,
    load_proposer,
    loss_cm,
    teacher_forced_class_accuracy,
    train_proposer,
)
from sketchchat.scene import (
    ContextWindow,
    Scene,
    SceneObject,
    TextToken,
    build_context_sequence,
)

SMALL = ProposerConfig(
    layers=2, heads=2, model_dim=32, ff_dim=64, max_positions=128, max_objects=5,
    lr=1e-3, epochs=5, batch_size=8, seed=0,
)

_EMB_CACHE: dict[str, np.ndarray] = {}


def tok(surface: str) -> TextToken:
    if surface not in _EMB_CACHE:
        rng = np.random.default_rng(abs(hash(surface)) % (2**32))
        _EMB_CACHE[surface] = rng.normal(0, 0.5, 300).astype(np.float32)
    return TextToken(surface=surface, embedding=_EMB_CACHE[surface])


def toks(text: str) -> tuple[TextToken, ...]:
    return tuple(tok(w) for w in text.split())


def obj(class_id: int, x: float = 0.5, y: float = 0.5, **kw) -> SceneObject:
    return SceneObject(class_id=class_id, x=x, y=y, **kw)


def tiny_corpus() -> list[TrainingPair]:
    tree = obj(3, x=0.2, y=0.6, subtype_id=1, size_id=1)
    duck = obj(7, x=0.7, y=0.4, size_id=0, flip=True)
    scene0 = Scene(objects=(tree,), turn_index=0)
    scene1 = Scene(objects=(tree, duck), turn_index=1)
    pair0 = TrainingPair(
        context=ContextWindow(current_instruction=toks("draw a tree on the left")),
        target=scene0,
    )
    pair1 = TrainingPair(
        context=ContextWindow(
            turns=((toks("draw a tree on the left"), scene0),),
            current_instruction=toks("now add a duck facing left"),
        ),
        target=scene1,
    )
    return [pair0, pair1]


def saturated_prediction(o: SceneObject, is_end: bool = False) -> ObjectPrediction:
    kind = np.array([-100.0, 100.0, 0.0]) if is_end else np.array([-100.0, -100.0, 0.0])
    hot = lambda n, k: np.where(np.arange(n) == k, 100.0, 0.0)
    return ObjectPrediction(
        kind_scores=kind,
        class_logits=hot(58, o.class_id),
        subtype_logits=hot(35, o.subtype_id),
        size_logits=hot(3, o.size_id),
        flip_logits=hot(2, int(o.flip)),
        position=np.array([o.x, o.y]),
    )


class TestConfig:
    def test_defaults(self):
        c = ProposerConfig()
        assert c.layers == 6 and c.heads == 8 and c.model_dim == 128
        assert c.lambda_sub == c.lambda_flip == c.lambda_size == 5e-2
        assert c.lambda_xy == 1.0
        assert c.lr == 1e-4 and c.epochs == 200
        assert c.context_turns == 10 and c.clip_norm == 1.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            ProposerConfig(model_dim=30, heads=4)
        with pytest.raises(ConfigError):
            ProposerConfig(lr=0.0)


class TestForward:
    def test_one_prediction_per_row(self):
        model = CompositionProposer(SMALL)
        ctx = tiny_corpus()[1].context
        seq = build_context_sequence(ctx)
        preds, amap = model.forward(seq)
        assert len(preds) == seq.shape[0]
        assert len(amap.labels) == seq.shape[0]
        assert amap.base_index == seq.shape[0] - 1

    def test_positions_in_unit_square(self):
        model = CompositionProposer(SMALL)
        seq = build_context_sequence(tiny_corpus()[0].context)
        preds, _ = model.forward(seq)
        for p in preds:
            assert 0.0 <= p.position[0] <= 1.0 and 0.0 <= p.position[1] <= 1.0

    def test_causality_two_pass(self):
        model = CompositionProposer(SMALL)
        seq = build_context_sequence(tiny_corpus()[1].context)
        preds_a, _ = model.forward(seq)
        bumped = seq.copy()
        bumped[-1] += 0.5
        preds_b, _ = model.forward(bumped)
        for a, b in zip(preds_a[:-1], preds_b[:-1]):
            np.testing.assert_array_equal(a.class_logits, b.class_logits)
            np.testing.assert_array_equal(a.position, b.position)

    def test_empty_sequence_rejected(self):
        model = CompositionProposer(SMALL)
        with pytest.raises(DimensionError):
            model.forward(np.zeros((0, 402), dtype=np.float32))

    def test_attention_rows_sum_to_one(self):
        model = CompositionProposer(SMALL)
        seq = build_context_sequence(tiny_corpus()[1].context)
        _, amap = model.forward(seq)
        for layer in amap.weights:
            sums = layer.sum(axis=-1)
            np.testing.assert_allclose(sums, np.ones_like(sums), atol=1e-5)


class TestLossCm:
    def test_perfect_prediction_exactly_zero(self):
        scene = Scene(objects=(obj(5, x=0.25, y=0.75, subtype_id=2, flip=True),))
        preds = [saturated_prediction(scene.objects[0]), saturated_prediction(scene.objects[0], is_end=True)]
        comps = loss_cm(preds, scene)
        assert float(comps.total) == 0.0
        assert float(comps.l_c) == 0.0
        assert float(comps.l_xy) == 0.0

    def test_uniform_class_logits(self):
        scene = Scene(objects=(obj(5),))
        perfect = saturated_prediction(scene.objects[0])
        perfect.class_logits = np.zeros(58)
        preds = [perfect, saturated_prediction(scene.objects[0], is_end=True)]
        comps = loss_cm(preds, scene)
        assert float(comps.l_c) == pytest.approx(math.log(58), abs=1e-12)
        assert float(comps.l_c) == pytest.approx(4.0604, abs=1e-4)

    def test_three_four_five_position(self):
        truth = obj(5, x=0.5, y=0.5)
        scene = Scene(objects=(truth,))
        p = saturated_prediction(truth)
        p.position = np.array([0.5 + 0.3, 0.5 + 0.4])
        comps = loss_cm([p, saturated_prediction(truth, is_end=True)], scene)
        assert float(comps.l_xy) == pytest.approx(0.5, abs=1e-12)
        assert float(comps.total) == pytest.approx(0.5 * 1.0, abs=1e-12)

    def test_weights_enter_total(self):
        truth = obj(5, subtype_id=3)
        scene = Scene(objects=(truth,))
        p = saturated_prediction(truth)
        p.subtype_logits = np.zeros(35)
        comps = loss_cm([p, saturated_prediction(truth, is_end=True)], scene)
        assert float(comps.l_sub) == pytest.approx(math.log(35), abs=1e-12)
        assert float(comps.total) == pytest.approx(5e-2 * math.log(35), abs=1e-12)

    def test_alignment_error(self):
        scene = Scene(objects=(obj(5),))
        with pytest.raises(AlignmentError):
            loss_cm([saturated_prediction(obj(5))], scene)

    def test_empty_scene_end_only(self):
        scene = Scene()
        comps = loss_cm([saturated_prediction(obj(0), is_end=True)], scene)
        assert float(comps.total) == 0.0


class TestGenerate:
    def test_forced_end_gives_empty_scene(self):
        model = CompositionProposer(SMALL)
        with torch.no_grad():
            model.out_proj.bias[1] = 100.0
        ctx = tiny_corpus()[0].context
        result = model.generate_scene(ctx)
        assert len(result.scene) == 0
        assert not result.truncated
        assert result.scene.turn_index == 0

    def test_cap_sets_truncated_flag(self):
        model = CompositionProposer(SMALL)
        with torch.no_grad():
            model.out_proj.bias[0] = -100.0
            model.out_proj.bias[1] = -100.0
        result = model.generate_scene(tiny_corpus()[0].context)
        assert result.truncated
        assert len(result.scene) == SMALL.max_objects

    def test_greedy_decode_deterministic(self):
        a = CompositionProposer(SMALL).generate_scene(tiny_corpus()[1].context)
        b = CompositionProposer(SMALL).generate_scene(tiny_corpus()[1].context)
        assert a.scene == b.scene

    def test_turn_index_advances(self):
        model = CompositionProposer(SMALL)
        with torch.no_grad():
            model.out_proj.bias[1] = 100.0
        result = model.generate_scene(tiny_corpus()[1].context)
        assert result.scene.turn_index == 1


class TestTraining:
    def test_loss_decreases_over_first_steps(self):
        model = CompositionProposer(SMALL)
        pairs = tiny_corpus()
        before = float(evaluate_loss(model, pairs).total)
        train_proposer(model, pairs, epochs=50)
        after = float(evaluate_loss(model, pairs).total)
        assert after < before

    def test_memorizes_tiny_corpus(self):
        model = CompositionProposer(SMALL)
        pairs = tiny_corpus()
        train_proposer(model, pairs, epochs=300)
        assert teacher_forced_class_accuracy(model, pairs) == 1.0
        for pair in pairs:
            result = model.generate_scene(pair.context)
            got = [o.class_id for o in result.scene.objects]
            want = [o.class_id for o in pair.target.objects]
            assert got == want

    def test_first_step_gradient_deterministic(self):
        grads = []
        for _ in range(2):
            model = CompositionProposer(SMALL)
            train_proposer(model, tiny_corpus(), epochs=1)
            grads.append(torch.cat([p.detach().flatten() for p in model.parameters()]))
        torch.testing.assert_close(grads[0], grads[1], atol=0, rtol=0)

    def test_checkpoint_round_trip_val_loss(self, tmp_path):
        model = CompositionProposer(SMALL)
        pairs = tiny_corpus()
        path = tmp_path / "proposer.ckpt"
        metrics = tmp_path / "metrics.jsonl"
        summary = train_proposer(
            model, pairs, val_pairs=pairs, checkpoint_path=path, metrics_path=metrics, epochs=5
        )
        reloaded = load_proposer(path)
        val = float(evaluate_loss(reloaded, pairs).total)
        assert val == pytest.approx(summary["best_loss"], abs=1e-6)

    def test_metrics_log_format(self, tmp_path):
        model = CompositionProposer(SMALL)
        metrics = tmp_path / "metrics.jsonl"
        train_proposer(model, tiny_corpus(), val_pairs=tiny_corpus(), metrics_path=metrics, epochs=3)
        lines = [json.loads(line) for line in metrics.read_text().splitlines()]
        assert len(lines) == 6
        for entry in lines:
            assert set(entry) == {"epoch", "split", "L_c", "L_sub", "L_flip", "L_size", "L_xy", "total"}
            assert entry["split"] in ("train", "val")

    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigError):
            train_proposer(CompositionProposer(SMALL), [])


class TestAttention:
    def test_rank_weights_sum_to_one(self):
        model = CompositionProposer(SMALL)
        with torch.no_grad():
            model.out_proj.bias[0] = -100.0
            model.out_proj.bias[1] = -100.0
        result = model.generate_scene(tiny_corpus()[1].context)
        assert len(result.scene) > 0
        ranked = attention_for_object(result.attention, 0)
        assert sum(w for _, w in ranked) == pytest.approx(1.0, abs=1e-5)
        assert all(ranked[i][1] >= ranked[i + 1][1] for i in range(len(ranked) - 1))

    def test_single_row_gets_full_weight(self):
        model = CompositionProposer(SMALL)
        ctx = ContextWindow()
        seq = build_context_sequence(ctx)
        assert seq.shape[0] == 1
        _, amap = model.forward(seq)
        ranked = attention_for_object(amap, 0)
        assert ranked == [("<start>", pytest.approx(1.0))]

    def test_out_of_range_object(self):
        model = CompositionProposer(SMALL)
        _, amap = model.forward(build_context_sequence(ContextWindow()))
        with pytest.raises(DimensionError):
            attention_for_object(amap, 3)


class TestDetectUnknown:
    def make_result(self, ctx: ContextWindow, peak_token_index: int) -> GenerationResult:
        seq = build_context_sequence(ctx)
        t = seq.shape[0]
        base = t - 1
        m_i = len(ctx.current_instruction)
        weights = np.zeros((2, t, t), dtype=np.float32)
        weights[:, :, 0] = 1.0
        weights[:, base, :] = 0.0
        weights[:, base, base - m_i + peak_token_index] = 1.0
        amap = AttentionMap(weights=[weights], labels=["x"] * t, base_index=base)
        return GenerationResult(scene=Scene(), attention=amap, truncated=False)

    def test_picks_highest_attended_candidate(self):
        ctx = ContextWindow(current_instruction=toks("add a sandwich and a parrot"))
        result = self.make_result(ctx, peak_token_index=5)
        assert detect_unknown_object(ctx, result) == "parrot"
        result = self.make_result(ctx, peak_token_index=2)
        assert detect_unknown_object(ctx, result) == "sandwich"

    def test_stopword_only_instruction(self):
        ctx = ContextWindow(current_instruction=toks("add it to the left ."))
        result = self.make_result(ctx, peak_token_index=0)
        assert detect_unknown_object(ctx, result) is None

    def test_object_emitted_returns_none(self):
        ctx = ContextWindow(current_instruction=toks("add a sandwich"))
        result = self.make_result(ctx, peak_token_index=2)
        object.__setattr__(result.scene, "objects", (obj(3),))
        assert detect_unknown_object(ctx, result) is None

    def test_stopwords_attention_ignored(self):
        # attention peaks on "the" but the only candidate word must win
        ctx = ContextWindow(current_instruction=toks("put the sandwich there"))
        result = self.make_result(ctx, peak_token_index=1)
        assert detect_unknown_object(ctx, result) == "sandwich"

    def test_untrained_end_biased_model_end_to_end(self):
        model = CompositionProposer(SMALL)
        with torch.no_grad():
            model.out_proj.bias[1] = 100.0
        ctx = ContextWindow(current_instruction=toks("add a sandwich to the scene ."))
        result = model.generate_scene(ctx)
        assert len(result.scene) == 0
        assert detect_unknown_object(ctx, result) == "sandwich"
