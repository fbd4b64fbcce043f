"""Orchestration layer: corpus minting, caches, provenance, demo invariants."""

import json

import numpy as np
import pytest

from credtrace.config import Config
from credtrace.corpus import make_corpus, read_truth
from credtrace.encoder import EncoderConfig, PatchEncoder
from credtrace.keys import derive_signing_key
from credtrace.ledger import Ledger
from credtrace.manifest import GuidFactory, ManifestStore
from credtrace.pipeline import (
    BASE_ROYALTY,
    build_corpus_index,
    corpus_patch_vectors,
    creator_identity,
    demo_mnist_scale,
    export_patch_vectors,
    fund_payer,
    index_from_embeddings,
    load_descriptors,
    mint_corpus,
    mint_generated_manifest,
    mint_model_manifest,
    save_descriptors,
    step_compose_queries,
    step_ingest,
    trace_training_creators,
)
from credtrace.storage import FormatError, write_embeddings
from credtrace.vectorindex import IndexParams, save_index


@pytest.fixture(scope="module")
def small_mint():
    """Eight minted images with a funded payer, shared across tests."""
    images = make_corpus(8, seed=3, size=32)
    ledger = Ledger()
    store = ManifestStore()
    payer = derive_signing_key(b"pipeline-test", "payer")
    registry = mint_corpus(images, ledger, store, identity_seed="pipeline-test",
                           payer_wallet=payer.wallet)
    fund_payer(ledger, payer, registry, per_asset=500)
    return images, ledger, store, payer, registry


class TestCreatorIdentity:
    def test_deterministic_and_distinct(self):
        name_a, key_a = creator_identity("seed", "img-0001")
        name_b, key_b = creator_identity("seed", "img-0002")
        assert name_a == "creator-img-0001"
        assert key_a.wallet != key_b.wallet
        # same inputs, same wallet
        assert creator_identity("seed", "img-0001")[1].wallet == key_a.wallet

    def test_identity_seed_separates_universes(self):
        _, key_a = creator_identity("run-a", "img-0001")
        _, key_b = creator_identity("run-b", "img-0001")
        assert key_a.wallet != key_b.wallet


class TestMintCorpus:
    def test_registry_covers_corpus(self, small_mint):
        images, _, _, _, registry = small_mint
        assert sorted(registry) == sorted(images)
        for image_id, record in registry.items():
            assert record["creatorName"] == f"creator-{image_id}"
            assert record["manifest"].creator_name == record["creatorName"]
            assert isinstance(record["nftId"], int)

    def test_every_mint_passes_triangle_check(self, small_mint):
        _, ledger, store, _, registry = small_mint
        for record in registry.values():
            checks = ledger.verify_ora_triangle(record["manifest"])
            assert checks["ownershipOk"] and checks["rightsOk"]
            assert checks["attributionOk"]
            assert not checks["copyMintDetected"]

    def test_payer_holds_one_right_per_asset(self, small_mint):
        _, ledger, _, payer, registry = small_mint
        for record in registry.values():
            rights = ledger.contracts[record["rightsContract"]]["rights"]
            assert len(rights) == 1
            (row,) = rights.values()
            assert row["holder"] == payer.wallet
            assert row["rightKind"] == "GenerateImage"
            assert row["baseRoyalty"] == BASE_ROYALTY
            assert row["nftId"] == record["nftId"]

    def test_funding_conserves_supply(self, small_mint):
        _, ledger, _, _, registry = small_mint
        assert ledger.circulating() == ledger.total_issued
        escrow = sum(c["escrow"].get(p, 0)
                     for c in ledger.contracts.values()
                     if c["kind"] == "rights"
                     for p in c["escrow"])
        assert escrow == 500 * len(registry)


class TestDescriptorCache:
    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        cache = {(f"img-{i:04d}", slot): rng.random((55, 16)).astype(np.float32)
                 for i in range(3) for slot in (0, 1, 5, 20)}
        path = tmp_path / "cache.npz"
        save_descriptors(cache, path)
        loaded = load_descriptors(path)
        assert sorted(loaded) == sorted(cache)
        for key in cache:
            assert np.array_equal(loaded[key], cache[key])

    def test_corpus_patch_vectors_ordering(self):
        images = make_corpus(3, seed=5, size=32)
        encoder = PatchEncoder(EncoderConfig(input_size=32))
        keys, vectors = corpus_patch_vectors(images, encoder)
        assert len(keys) == len(vectors) == 3 * 21
        assert keys == sorted(keys)
        assert keys[0] == ("img-0000", 0)
        assert np.allclose(np.linalg.norm(vectors, axis=1), 1.0, atol=1e-5)


class TestEmbeddingExport:
    """Precomputed fingerprints must feed the index exactly like the encoder."""

    def test_exported_table_rebuilds_identical_index(self, tmp_path):
        images = make_corpus(8, seed=7, size=32)
        encoder = PatchEncoder(EncoderConfig(input_size=32))
        params = IndexParams(nlist=8, m=16, nprobe=4)

        direct = build_corpus_index(images, encoder, params, seed=0)
        table = tmp_path / "vectors.bin"
        assert export_patch_vectors(images, encoder, table) == 8 * 21
        rebuilt = index_from_embeddings(table, params, seed=0)

        assert rebuilt.keys == direct.keys
        assert np.array_equal(rebuilt.vectors, direct.vectors)
        save_index(direct, tmp_path / "a.idx")
        save_index(rebuilt, tmp_path / "b.idx")
        assert (tmp_path / "a.idx").read_bytes() == (tmp_path / "b.idx").read_bytes()

    def test_empty_table_rejected(self, tmp_path):
        table = tmp_path / "vectors.bin"
        write_embeddings(table, [])
        with pytest.raises(FormatError, match="no rows"):
            index_from_embeddings(table, IndexParams(nlist=8, m=16, nprobe=4))


class TestProvenanceChain:
    def test_model_manifest_lists_all_training_images(self, small_mint):
        _, _, store, payer, registry = small_mint
        model = mint_model_manifest(store, registry, b"weights", payer,
                                    guid_factory=GuidFactory(seed=50))
        assert len(model.ingredients) == len(registry)
        assert {ing.role for ing in model.ingredients} == {"TrainingImage"}

    def test_walk_from_generated_asset_reaches_every_creator(self, small_mint):
        images, ledger, store, payer, registry = small_mint
        factory = GuidFactory(seed=51)
        model = mint_model_manifest(store, registry, b"weights", payer,
                                    guid_factory=factory)
        generated = mint_generated_manifest(store, model, images["img-0000"],
                                            payer, guid_factory=factory)
        assert [ing.role for ing in generated.ingredients] == ["GenModel"]
        creators = trace_training_creators(generated, store, ledger)
        assert len(creators) == len(registry)
        by_guid = {r["manifest"].guid: i for i, r in registry.items()}
        for row in creators:
            image_id = by_guid[row["guid"]]
            assert row["creatorName"] == f"creator-{image_id}"
            expected = creator_identity("pipeline-test", image_id)[1].wallet
            assert row["wallet"] == expected


class TestSteps:
    def test_ingest_writes_whole_corpus(self, tmp_path):
        config = Config(corpus_size=6, image_size=32).resolve(tmp_path)
        paths = step_ingest(config)
        assert len(paths) == 6
        assert all(p.exists() and p.suffix == ".png" for p in paths)

    def test_compose_queries_writes_sidecars(self, tmp_path):
        config = Config(corpus_size=12, image_size=32).resolve(tmp_path)
        images = make_corpus(12, seed=config.corpus_seed, size=32)
        paths = step_compose_queries(config, images, n_queries=3, severity=0.2)
        assert len(paths) == 3
        for image_path in paths:
            assert image_path.exists()
            truth = read_truth(image_path)
            assert truth["severity"] == 0.2


class TestDemoRun:
    @pytest.fixture(scope="class")
    @staticmethod
    def result(tmp_path_factory):
        config = Config(corpus_size=100, image_size=32, input_size=32,
                        encoder_epochs=1, verifier_epochs=1, auc_floor=0.5,
                        ).resolve(tmp_path_factory.mktemp("demo"))
        return demo_mnist_scale(config, n_queries=2)

    def test_conservation_holds(self, result):
        assert result.minted == result.corpus_size == 100
        assert result.conservation_ok
        assert result.circulating_after == result.circulating_before
        assert result.escrow_decrease == result.total_paid

    def test_payouts_follow_royalty_weights(self, result):
        for query in result.queries:
            assert query["provenanceCreators"] == 100
            for payout in query["payouts"]:
                if payout["status"] == "paid":
                    expected = round(BASE_ROYALTY * payout["weight"])
                    assert payout["payout"] == expected

    def test_report_serializes_to_json(self, result):
        blob = json.dumps(result.to_dict())
        parsed = json.loads(blob)
        assert parsed["minted"] == 100
        assert len(parsed["queries"]) == 2
