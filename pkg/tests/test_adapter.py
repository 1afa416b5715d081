import math

import numpy as np
import pytest

from conftest import TOPICS, build_planted_doc
from oracles import fd_gradient, scalar_contrastive_loss
from sparseqa.adapter import (
    LinearAdapter,
    TrainConfig,
    TrainingBatch,
    compose_total_loss,
    contrastive_loss,
    contrastive_loss_grad,
    sample_negatives,
    train_adapter,
)
from sparseqa.embedding import EmbeddingCache, OfflineEmbedder, prefill_cache
from sparseqa.errors import ConfigError, DimsError, DomainError, TrainingDivergedError
from sparseqa.sampler import SamplerConfig, sample


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


class TestLoss:
    def test_symmetric_case_ln3(self):
        # one positive, two negatives, all similarities equal -> softmax 1/3
        q = unit([1, 0])
        e = unit([1, 1])
        loss = contrastive_loss(q, [e], [e, e], tau=0.5)
        assert loss == pytest.approx(math.log(3), abs=1e-12)

    def test_scalar_fixture_0_4076(self):
        q, pos = unit([1, 0]), unit([1, 0])
        negs = [unit([0, 1]), unit([-1, 0])]
        expected = scalar_contrastive_loss(q, [pos], negs, tau=1.0)
        assert expected == pytest.approx(0.4076, abs=5e-5)
        assert contrastive_loss(q, [pos], negs, tau=1.0) == pytest.approx(expected, abs=1e-12)

    def test_temperature_matters(self):
        q, pos = unit([1, 0]), unit([1, 0])
        negs = [unit([0, 1]), unit([-1, 0])]
        assert contrastive_loss(q, [pos], negs, 1.0) != \
            contrastive_loss(q, [pos], negs, 0.07)

    def test_dominant_positive_small_tau(self):
        q = unit([1, 0])
        loss = contrastive_loss(q, [unit([1, 0])], [unit([-1, 0]), unit([-1, 0])],
                                tau=0.05)
        assert 0 <= loss < 1e-10

    def test_matches_scalar_oracle_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            d = int(rng.choice([4, 16]))
            q = unit(rng.standard_normal(d))
            pos = [unit(rng.standard_normal(d)) for _ in range(int(rng.integers(1, 3)))]
            neg = [unit(rng.standard_normal(d)) for _ in range(int(rng.integers(1, 5)))]
            tau = float(rng.uniform(0.05, 1.0))
            assert contrastive_loss(q, pos, neg, tau) == pytest.approx(
                scalar_contrastive_loss(q, pos, neg, tau), rel=1e-12)

    def test_invalid_tau(self):
        with pytest.raises(ConfigError):
            contrastive_loss(unit([1, 0]), [unit([1, 0])], [unit([0, 1])], tau=0.0)

    def test_dims_mismatch(self):
        with pytest.raises(DimsError):
            contrastive_loss(unit([1, 0]), [unit([1, 0, 0])], [unit([0, 1])])

    def test_positivity(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            q = unit(rng.standard_normal(8))
            pos = [unit(rng.standard_normal(8))]
            neg = [unit(rng.standard_normal(8))]
            assert contrastive_loss(q, pos, neg, 0.07) > 0

    def test_permutation_invariance_exact(self):
        rng = np.random.default_rng(9)
        q = unit(rng.standard_normal(16))
        pos = [unit(rng.standard_normal(16)) for _ in range(3)]
        neg = [unit(rng.standard_normal(16)) for _ in range(5)]
        base = contrastive_loss(q, pos, neg, 0.07)
        for _ in range(10):
            pp = [pos[i] for i in rng.permutation(3)]
            nn = [neg[i] for i in rng.permutation(5)]
            assert contrastive_loss(q, pp, nn, 0.07) == base


class TestGradient:
    def _check(self, rng, d, P, N, tau):
        q = unit(rng.standard_normal(d))
        pos = [unit(rng.standard_normal(d)) for _ in range(P)]
        neg = [unit(rng.standard_normal(d)) for _ in range(N)]
        W = np.eye(d) + 0.1 * rng.standard_normal((d, d))
        adapter = LinearAdapter(W)
        loss, grad = contrastive_loss_grad(q, pos, neg, tau, adapter)

        def loss_at(Wx):
            return scalar_contrastive_loss(
                unit(Wx @ q), pos, neg, tau)

        assert loss == pytest.approx(loss_at(W), rel=1e-10)
        numeric = fd_gradient(loss_at, W, eps=1e-5)
        rel_err = np.abs(grad - numeric) / np.maximum(1.0, np.abs(numeric))
        assert rel_err.max() < 1e-5

    def test_degenerate_equal_sims(self):
        rng = np.random.default_rng(1)
        d = 4
        q = unit([1.0, 0, 0, 0])
        e = unit([0.5, 0.5, 0.5, 0.5])
        adapter = LinearAdapter(np.eye(d))
        loss, grad = contrastive_loss_grad(q, [e, e], [e, e], 1.0, adapter)

        def loss_at(Wx):
            return scalar_contrastive_loss(unit(Wx @ q), [e, e], [e, e], 1.0)

        numeric = fd_gradient(loss_at, np.eye(d), eps=1e-5)
        rel_err = np.abs(grad - numeric) / np.maximum(1.0, np.abs(numeric))
        assert rel_err.max() < 1e-5

    def test_random_configurations(self):
        rng = np.random.default_rng(12)
        for i in range(100):
            d = int(rng.choice([4, 16, 64]))
            P = int(rng.choice([1, 2]))
            N = int(rng.choice([2, 4]))
            self._check(rng, d, P, N, tau=0.07)


class TestComposeLoss:
    def test_sum(self):
        r = compose_total_loss(0.5, 0.25)
        assert (r.l_rep, r.l_qa_external, r.l_total) == (0.5, 0.25, 0.75)

    def test_absent_external(self):
        r = compose_total_loss(0.5)
        assert r.l_total == 0.5
        assert r.l_qa_external is None

    def test_nan_rejected(self):
        with pytest.raises(DomainError):
            compose_total_loss(float("nan"), 0.1)
        with pytest.raises(DomainError):
            compose_total_loss(0.1, -1.0)


class TestSampleNegatives:
    def test_forced_when_exactly_enough(self, tmp_path):
        from conftest import make_doc

        doc = make_doc(
            tmp_path,
            texts=[("pos text", ()), ("spare one", ()), ("spare two", ())],
            images=[("pos img", None, b"a"), ("spare img 1", None, b"b"),
                    ("spare img 2", None, b"c")],
        )
        rng = np.random.default_rng(0)
        got = sample_negatives(doc, ["t0", "i0"], rng)
        assert sorted(got) == ["i1", "i2", "t1", "t2"]

    def test_no_images_degrades_to_text(self, tmp_path):
        from conftest import make_doc

        doc = make_doc(tmp_path, texts=[(f"p{i} content", ()) for i in range(8)])
        got = sample_negatives(doc, ["t0"], np.random.default_rng(1))
        assert len(got) == 4
        assert all(g.startswith("t") for g in got)

    def test_uniformity_chi_square(self, tmp_path):
        from conftest import make_doc

        doc = make_doc(tmp_path, texts=[(f"p{i} content", ()) for i in range(11)])
        rng = np.random.default_rng(2)
        counts = {f"t{i}": 0 for i in range(1, 11)}
        trials = 25_000  # 10 spares, 4 drawn each time
        for _ in range(trials):
            for cid in sample_negatives(doc, ["t0"], rng):
                counts[cid] += 1
        expected = trials * 4 / 10
        sigma = math.sqrt(trials * (4 / 10) * (1 - 4 / 10))
        for cid, n in counts.items():
            assert abs(n - expected) <= 3 * sigma, (cid, n, expected)


def _planted_batches(rng, n_queries, chunk_provider, query_provider, doc, cache):
    from sparseqa.embedding import text_content_hash

    batches = []
    text_chunks = list(doc.text_chunks())
    for qi in range(n_queries):
        topic = TOPICS[qi % len(TOPICS)]
        question = f"question {qi} regarding {topic} today?"
        qv = query_provider.embed_text(question).values.astype(np.float64)
        pos_ids = [c.chunk_id for c in text_chunks if topic in c.text]
        neg_ids = sample_negatives(doc, pos_ids, rng)
        def vec(cid):
            c = doc.chunk(cid)
            if c.modality == "text":
                rec = cache.get(chunk_provider.provider_id, text_content_hash(c.text))
            else:
                from sparseqa.embedding import image_content_hash

                rec = cache.get(chunk_provider.provider_id,
                                image_content_hash(c.image_ref.resolve(), c.caption))
            return rec.vector.values.astype(np.float64)
        batches.append(TrainingBatch(
            query_vec=qv,
            positive_vecs=tuple(vec(c) for c in pos_ids),
            negative_vecs=tuple(vec(c) for c in neg_ids),
        ))
    return batches


def _recall_at_5(adapter, queries, doc, cache, chunk_provider):
    """Mean recall@5 of planted gt chunks under the (adapted) query vector."""
    from sparseqa.embedding import EmbeddingVector
    from sparseqa.sampler import score_all, top_k

    hits, total = 0, 0
    for qv_raw, gt_ids in queries:
        adapted = EmbeddingVector.normalized(adapter.apply(qv_raw))
        scores = score_all(adapted, doc, cache,
                           chunk_provider.provider_id, chunk_provider.provider_id)
        top = set(top_k(scores, SamplerConfig(k=5)).chunk_ids())
        hits += len(top & set(gt_ids))
        total += len(gt_ids)
    return hits / total


class TestTraining:
    def test_zero_learning_rate_is_noop(self, tmp_path):
        rng = np.random.default_rng(0)
        p = OfflineEmbedder(7, 64, planted_topics=TOPICS)
        doc = build_planted_doc(tmp_path, TOPICS, chunks_per_topic=2, noise_chunks=4)
        cache = EmbeddingCache()
        prefill_cache(cache, doc, p, p)
        batches = _planted_batches(rng, 20, p, p, doc, cache)
        config = TrainConfig(learning_rate=0.0, epochs=5, seed=1)
        adapter, traj = train_adapter(batches, config)
        assert np.array_equal(adapter.weight, np.eye(64))
        assert all(t == pytest.approx(traj[0], abs=1e-12) for t in traj)

    def test_seed_determinism_bitwise(self, tmp_path):
        rng1, rng2 = np.random.default_rng(3), np.random.default_rng(3)
        p = OfflineEmbedder(7, 32, planted_topics=TOPICS)
        doc = build_planted_doc(tmp_path, TOPICS, chunks_per_topic=2, noise_chunks=4)
        cache = EmbeddingCache()
        prefill_cache(cache, doc, p, p)
        config = TrainConfig(epochs=4, seed=42)
        a1, t1 = train_adapter(_planted_batches(rng1, 16, p, p, doc, cache), config)
        a2, t2 = train_adapter(_planted_batches(rng2, 16, p, p, doc, cache), config)
        assert np.array_equal(a1.weight, a2.weight)
        assert t1 == t2

    def test_divergence_detected(self):
        rng = np.random.default_rng(0)
        q = unit(rng.standard_normal(4))
        b = TrainingBatch(q, (unit(rng.standard_normal(4)),),
                          (unit(rng.standard_normal(4)),))
        with pytest.raises(TrainingDivergedError):
            train_adapter([b], TrainConfig(learning_rate=1e300, epochs=50, seed=0))

    def test_planted_corpus_efficacy(self, tmp_path):
        # queries live in a rotated space; a linear adapter must learn the
        # rotation back. recall@5 low at init, high after training.
        dims = 32
        chunk_provider = OfflineEmbedder(7, dims, planted_topics=TOPICS)
        query_provider = OfflineEmbedder(7, dims, planted_topics=TOPICS,
                                         rotation_seed=99)
        doc = build_planted_doc(tmp_path, TOPICS, chunks_per_topic=2,
                                noise_chunks=16, images=4)
        cache = EmbeddingCache()
        prefill_cache(cache, doc, chunk_provider, chunk_provider)
        rng = np.random.default_rng(10)
        batches = _planted_batches(rng, 200, chunk_provider, query_provider, doc, cache)

        held_out = []
        text_chunks = list(doc.text_chunks())
        for qi in range(40):
            topic = TOPICS[qi % len(TOPICS)]
            q = f"held-out question {qi} about {topic}?"
            qv = query_provider.embed_text(q).values.astype(np.float64)
            gt = [c.chunk_id for c in text_chunks if topic in c.text]
            held_out.append((qv, gt))

        init = LinearAdapter.identity(dims)
        r0 = _recall_at_5(init, held_out, doc, cache, chunk_provider)
        assert r0 <= 0.3

        config = TrainConfig(learning_rate=0.05, epochs=12, batch_size=8, seed=0)
        adapter, traj = train_adapter(batches, config)
        for a, b in zip(traj[:10], traj[1:10]):
            assert b < a  # strictly decreasing over the first 10 epochs
        r1 = _recall_at_5(adapter, held_out, doc, cache, chunk_provider)
        assert r1 >= 0.9

    def test_adapter_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        a = LinearAdapter(rng.standard_normal((8, 8)))
        a.save(tmp_path / "a.wkad")
        b = LinearAdapter.load(tmp_path / "a.wkad")
        assert np.allclose(a.weight, b.weight, atol=1e-6)
