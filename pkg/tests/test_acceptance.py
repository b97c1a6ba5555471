"""Acceptance gate: every criterion below runs at its stated tolerance and
prints one PASS line on success (pytest reports the failures).

Run with: pytest tests/test_acceptance.py -v -s
"""

import math
import time

import numpy as np
import pytest
import torch

import oracles
from conftest import (STAGE1_CONFIG, STAGE2_CONFIG, TEXT_SEED, VIS_SEED,
                      run_cli)
from persearch.data import build_match_labels, load_manifest
from persearch.encoders import (FeatureTable, ToyDualEncoder, ToyEncoderConfig,
                                build_feature_cache, inject_pseudo_word)
from persearch.evaluation import average_precision, evaluate, rank_k
from persearch.hashing import parameter_hash
from persearch.losses import (EmbeddingBatch, LossConfig, MaskedPrediction,
                              cmpm_loss, id_loss, irr_loss, itc_loss,
                              tinet_losses)
from persearch.retrieval import (RetrievalEngine, RetrievalResult,
                                 compose_query, rank_gallery)
from persearch.tinet import TINetConfig, tinet_init
from persearch.tokenizer import MAX_TOKENS
from persearch.training import TrainConfig, run_stage1, run_stage2

TAU = LossConfig().tau
EPS = LossConfig().epsilon


def passed(name):
    print(f"\nACCEPTANCE {name}: PASS")


def random_embedding_batch(rng, with_c=False):
    n = int(rng.integers(1, 9))
    d = int(rng.integers(2, 17))
    ids = tuple(f"id{rng.integers(3)}" for _ in range(n))
    make = lambda: torch.tensor(rng.standard_normal((n, d)))
    return EmbeddingBatch(identity_ids=ids, f_v=make(), f_t=make(),
                          f_c=make() if with_c else None)


class TestLossOracles:
    def test_loss_oracles_hundred_batches(self):
        start = time.monotonic()
        rng = np.random.default_rng(2024)
        checked = 0
        while checked < 100:
            batch = random_embedding_batch(rng, with_c=True)
            n = len(batch.identity_ids)
            fv, ft, fc = (batch.f_v.numpy(), batch.f_t.numpy(),
                          batch.f_c.numpy())
            ids = batch.identity_ids
            assert abs(cmpm_loss(batch).item()
                       - oracles.cmpm(fv, ft, ids, TAU, EPS)) <= 1e-9
            assert abs(itc_loss(batch).item()
                       - oracles.itc(fv, ft, TAU)) <= 1e-9
            assert abs(tinet_losses(batch, mode="Vis").item()
                       - oracles.tinet_loss(fv, fc, ids, TAU, EPS)) <= 1e-9
            assert abs(tinet_losses(batch, mode="Text").item()
                       - oracles.tinet_loss(ft, fc, ids, TAU, EPS)) <= 1e-9

            m, v = int(rng.integers(1, 7)), int(rng.integers(2, 17))
            logits = rng.standard_normal((m, v))
            target_idx = rng.integers(v, size=m)
            one_hot = np.zeros((m, v))
            one_hot[np.arange(m), target_idx] = 1.0
            pred = MaskedPrediction(logits=torch.tensor(logits),
                                    targets=torch.tensor(one_hot))
            assert abs(irr_loss(pred).item()
                       - oracles.irr(logits, target_idx)) <= 1e-9

            c = int(rng.integers(2, 17))
            lv, lt = rng.standard_normal((n, c)), rng.standard_normal((n, c))
            class_ids = rng.integers(c, size=n).tolist()
            assert abs(id_loss(torch.tensor(lv), torch.tensor(lt),
                               class_ids).item()
                       - oracles.id_cross_entropy(lv, lt, class_ids)) <= 1e-9
            checked += 1
        elapsed = time.monotonic() - start
        assert elapsed < 60, f"loss oracle sweep took {elapsed:.1f}s"
        passed(f"loss oracles ({checked} batches, {elapsed:.1f}s)")


class TestGradientChecks:
    def _grad_check(self, fn, *arrays):
        tensors = [torch.tensor(a, requires_grad=True) for a in arrays]
        fn(*tensors).backward()
        for i, tensor in enumerate(tensors):
            def partial(x, idx=i):
                args = [torch.tensor(a) for a in arrays]
                args[idx] = torch.tensor(x)
                return float(fn(*args).item())
            numeric = oracles.finite_difference_gradient(partial,
                                                         arrays[i].copy(),
                                                         h=1e-4)
            oracles.assert_gradients_close(tensors[i].grad.numpy(), numeric,
                                           rtol=1e-4)

    def test_gradients_of_all_losses_and_tinet(self):
        start = time.monotonic()
        rng = np.random.default_rng(77)
        ids = ("a", "b", "a", "c")
        fv, ft, fc = (rng.standard_normal((4, 6)) for _ in range(3))

        self._grad_check(lambda a, b: cmpm_loss(
            EmbeddingBatch(identity_ids=ids, f_v=a, f_t=b)), fv, ft)
        self._grad_check(lambda a, b: itc_loss(
            EmbeddingBatch(identity_ids=ids, f_v=a, f_t=b)), fv, ft)
        self._grad_check(lambda a, c: tinet_losses(
            EmbeddingBatch(identity_ids=ids, f_v=a, f_c=c), mode="Vis"), fv, fc)
        self._grad_check(lambda b, c: tinet_losses(
            EmbeddingBatch(identity_ids=ids, f_t=b, f_c=c), mode="Text"), ft, fc)

        logits = rng.standard_normal((3, 7))
        one_hot = np.zeros((3, 7))
        one_hot[np.arange(3), rng.integers(7, size=3)] = 1.0
        self._grad_check(lambda lg: irr_loss(MaskedPrediction(
            logits=lg, targets=torch.tensor(one_hot))), logits)

        lv, lt = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
        self._grad_check(lambda a, b: id_loss(a, b, [0, 2, 4, 1]), lv, lt)

        # gradient through the inversion network itself
        net = tinet_init(TINetConfig(d_in=5, d_out=4, depth=2, hidden_width=6,
                                     seed=3)).double()
        x = torch.tensor(rng.standard_normal(5))
        target = torch.tensor(rng.standard_normal(4))

        def net_loss(weight_array):
            with torch.no_grad():
                net.layers[0].weight.copy_(torch.tensor(weight_array))
            return float(((net(x) - target) ** 2).sum().item())

        w0 = net.layers[0].weight.detach().numpy().copy()
        loss = ((net(x) - target) ** 2).sum()
        net.zero_grad()
        loss.backward()
        analytic = net.layers[0].weight.grad.numpy().copy()
        numeric = oracles.finite_difference_gradient(net_loss, w0, h=1e-4)
        oracles.assert_gradients_close(analytic, numeric, rtol=1e-4)

        elapsed = time.monotonic() - start
        assert elapsed < 120, f"gradient checks took {elapsed:.1f}s"
        passed(f"gradient checks ({elapsed:.1f}s)")


class TestTrivialLossValues:
    def test_trivial_values(self):
        one_pair = EmbeddingBatch(
            identity_ids=("a",),
            f_v=torch.tensor([[0.3, -1.2]], dtype=torch.float64),
            f_t=torch.tensor([[2.0, 0.7]], dtype=torch.float64))
        assert abs(cmpm_loss(one_pair).item()) <= 1e-6
        assert abs(itc_loss(one_pair).item()) == 0.0
        for c in (2, 10, 1000):
            loss = id_loss(torch.zeros(3, c, dtype=torch.float64),
                           torch.zeros(3, c, dtype=torch.float64),
                           [0, c // 2, c - 1]).item()
            assert abs(loss - math.log(c)) <= 1e-9
        passed("trivial loss values")


class TestMetricOracles:
    def test_metric_oracles_thousand_rankings(self):
        rng = np.random.default_rng(55)
        analytic = average_precision(
            RetrievalResult(ranked_ids=("g1", "x", "g2", "y"),
                            scores=np.array([0.9, 0.8, 0.7, 0.6])),
            {"g1", "g2"})
        assert abs(analytic - (1 + 2 / 3) / 2) <= 1e-12
        assert round(analytic, 6) == 0.833333

        for _ in range(1000):
            n = int(rng.integers(2, 40))
            ids = [f"i{j}" for j in range(n)]
            rng.shuffle(ids)
            gt = set(rng.choice(ids, size=int(rng.integers(1, n + 1)),
                                replace=False))
            result = RetrievalResult(ranked_ids=tuple(ids),
                                     scores=np.linspace(1.0, 0.0, n))
            assert abs(average_precision(result, gt)
                       - oracles.average_precision(ids, gt)) <= 1e-12
            k = int(rng.integers(1, n + 1))
            assert rank_k(result, gt, k) == oracles.rank_k_hit(ids, gt, k)
        passed("metric oracles (1000 rankings)")


class TestOverfitSanity:
    def test_toy_recipe_end_to_end(self, toy_paths):
        start = time.monotonic()
        full = load_manifest(toy_paths.full_manifest, "image-caption")
        gallery_manifest = load_manifest(toy_paths.gallery_manifest,
                                         "image-caption")
        query_manifest = load_manifest(toy_paths.query_manifest, "image-only")
        triplets = load_manifest(toy_paths.triplets, "triplets")

        encoder = ToyDualEncoder(ToyEncoderConfig(seed=0))
        run_stage1(encoder, full, TrainConfig(**STAGE1_CONFIG))
        encoder.freeze()
        cache_full = build_feature_cache(encoder, full)

        cfg = TINetConfig(d_in=encoder.d_embed, d_out=encoder.d_token,
                          depth=3, hidden_width=64, seed=TEXT_SEED)
        stage2 = run_stage2(encoder, full, cache_full, [cfg], ["Text"],
                            TrainConfig(**STAGE2_CONFIG))
        trace = stage2.traces[0]
        assert len(trace) == 200
        assert trace[-1].loss <= 0.1 * trace[0].loss, \
            f"L_Text fell only {100 * (1 - trace[-1].loss / trace[0].loss):.1f}%"

        gallery = build_feature_cache(encoder, gallery_manifest)
        queries = build_feature_cache(encoder, query_manifest)
        engine = RetrievalEngine(encoder, gallery,
                                 tinets={"text": stage2.networks[0]},
                                 query_cache=queries)
        report = evaluate(triplets, engine, mode="composed",
                          tinet_ids=("text",))
        assert report.rank1 == 100.0

        elapsed = time.monotonic() - start
        assert elapsed < 300, f"overfit recipe took {elapsed:.1f}s"
        passed(f"overfit sanity (drop "
               f"{100 * (1 - trace[-1].loss / trace[0].loss):.1f}%, "
               f"rank1=100.0, {elapsed:.1f}s)")


class TestStructuralInvariants:
    def test_structural_invariants(self, workspace):
        # 1. stage 2 leaves encoder parameters untouched
        before = parameter_hash(workspace.encoder)
        cfg = TINetConfig(d_in=workspace.encoder.d_embed,
                          d_out=workspace.encoder.d_token, depth=2,
                          hidden_width=16, seed=5)
        run_stage2(workspace.encoder, workspace.full, workspace.cache_full,
                   [cfg], ["Vis"],
                   TrainConfig(epochs=1, steps_per_epoch=5, batch_size=8,
                               base_lr=1e-3, warmup_epochs=0, seed=5,
                               identity_cap=None))
        assert parameter_hash(workspace.encoder) == before

        # 2. exact template token layouts
        encoder = workspace.encoder
        tok = encoder.tokenizer
        table = encoder.token_table.detach()
        pseudo = torch.randn(encoder.d_token,
                             generator=torch.Generator().manual_seed(1))
        train_seq = inject_pseudo_word(encoder, "train", pseudo)
        assert train_seq.valid_length == 6
        for row, tid in enumerate([tok.bos_id, tok.ids["a"], tok.ids["photo"],
                                   tok.ids["of"]]):
            assert torch.equal(train_seq.vectors[row], table[tid])
        assert torch.equal(train_seq.vectors[4], pseudo)
        assert torch.equal(train_seq.vectors[5], table[tok.eos_id])
        infer_seq = inject_pseudo_word(encoder, "infer", pseudo,
                                       "wearing a red coat")
        expect = [tok.bos_id, tok.ids["a"], None, tok.ids["is"],
                  tok.ids["wearing"], tok.ids["a"], tok.ids["red"],
                  tok.ids["coat"], tok.eos_id]
        assert infer_seq.valid_length == len(expect)
        for row, tid in enumerate(expect):
            ref = pseudo if tid is None else table[tid]
            assert torch.equal(infer_seq.vectors[row], ref)
        for row in range(len(expect), MAX_TOKENS):
            assert torch.equal(infer_seq.vectors[row], table[tok.pad_id])

        # 3. fusion of k identical networks equals the single-network query
        f_v = workspace.cache_queries.images.matrix[0]
        single = compose_query(encoder, [workspace.text_net], f_v, "a red coat")
        for k in (2, 3, 5):
            fused = compose_query(encoder, [workspace.text_net] * k, f_v,
                                  "a red coat")
            assert np.max(np.abs(fused - single)) <= 1e-6

        # 4. deterministic tie-break, exact and partitioned
        gallery = FeatureTable(("a", "b", "c", "d"),
                               np.array([[0, 1], [1, 0], [1, 0], [1, 0]],
                                        dtype=np.float32))
        for method in ("exact", "partitioned"):
            result = rank_gallery(np.array([1.0, 0.0]), gallery, 4,
                                  method=method)
            assert result.ranked_ids == ("b", "c", "d", "a")
        passed("structural invariants")


class TestDeterminism:
    def test_every_subcommand_byte_identical(self, cli_project, tmp_path):
        c = str(cli_project.config_path)
        compare = {
            "finetune": ["trace.csv"],
            "cache_train": ["images.w4p", "images.w4p.json", "texts.w4p",
                            "texts.w4p.json"],
            "tinet": ["trace_0_text.csv"],
            "eval": ["report.json", "report.csv"],
            "probe": ["neighbors.jsonl"],
            "selfret": ["report.json"],
            "mine": ["candidates.jsonl"],
            "apply": ["triplets.jsonl", "audit.jsonl"],
            "filter": ["manifest.jsonl"],
        }
        rerun_args = {
            "finetune": ("finetune",),
            "cache_train": ("cache",),
            "tinet": ("train-tinet", "--mode", "Text", "--depth", "3",
                      "--hidden", "32"),
            "eval": ("eval",),
            "probe": ("probe-vocab",),
            "selfret": ("self-retrieval",),
            "mine": ("curate-mine",),
            "apply": ("curate-apply",),
            "filter": ("filter-corpus", "--top-fraction", "0.1"),
        }
        for name, argv in rerun_args.items():
            out = tmp_path / name
            rc = run_cli(*argv, "--config", c, "--out", str(out))
            assert rc == 0, f"{name} rerun failed"
            for fname in compare[name]:
                first = (cli_project.runs[name] / fname).read_bytes()
                second = (out / fname).read_bytes()
                assert first == second, f"{name}/{fname} differs between runs"
        passed("determinism (9 subcommands byte-identical)")


@pytest.mark.skip(reason="full-scale gate: needs pretrained CLIP weights and "
                         "the CUHK-PEDES/ITCPR datasets; see README recipe. "
                         "Targets: ITCPR Rank-1 40.054 +/- 1.5, mAP 49.903 "
                         "+/- 1.5; CUHK-PEDES Rank-1 73.847 +/- 1.5")
class TestFullScaleReference:
    def test_itcpr_reference_numbers(self):
        raise NotImplementedError
