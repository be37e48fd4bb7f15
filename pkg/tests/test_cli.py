import json

import numpy as np
import pytest

from leafsim import Label, LeafMatrix, SampleMeta, SimIndex, Subset, oracle_top_k
from leafsim.cli import main
from leafsim.io import (
    read_cooc_table,
    read_enrichment_jsonl,
    read_hits_jsonl,
    read_leaf_matrix,
    read_ranking_jsonl,
    write_leaf_matrix,
    write_sample_meta,
)

from conftest import fake_sha

LEAVES = [
    [0, 0, 0, 0],  # row 0, train benign
    [0, 0, 0, 1],  # row 1, train benign
    [5, 5, 5, 5],  # row 2, train malicious
    [5, 5, 5, 6],  # row 3, train malicious
    [0, 0, 0, 2],  # row 4, test benign
    [5, 5, 5, 7],  # row 5, test malicious
]
SPLITS = [
    (Label.BENIGN, Subset.TRAIN),
    (Label.BENIGN, Subset.TRAIN),
    (Label.MALICIOUS, Subset.TRAIN),
    (Label.MALICIOUS, Subset.TRAIN),
    (Label.BENIGN, Subset.TEST),
    (Label.MALICIOUS, Subset.TEST),
]


@pytest.fixture
def bank(tmp_path):
    """A small databank with leaves, metadata, queries and tag lines."""
    shas = [fake_sha(i) for i in range(6)]
    metas = [
        SampleMeta(row=i, sha256=shas[i], label=lab, subset=sub)
        for i, (lab, sub) in enumerate(SPLITS)
    ]
    leaves = tmp_path / "bank.lsim"
    meta = tmp_path / "bank.meta.jsonl"
    write_leaf_matrix(LeafMatrix(LEAVES), leaves)
    write_sample_meta(metas, meta)

    queries = tmp_path / "queries.lsim"
    write_leaf_matrix(LeafMatrix([LEAVES[4], LEAVES[5]]), queries)
    qmetas = [
        SampleMeta(row=0, sha256=shas[4], label=Label.BENIGN, subset=Subset.TEST),
        SampleMeta(row=1, sha256=shas[5], label=Label.MALICIOUS, subset=Subset.TEST),
    ]
    write_sample_meta(qmetas, tmp_path / "queries.meta.jsonl")

    tags = tmp_path / "tags.txt"
    tags.write_text(
        f"{shas[0]} NULL\n"
        f"{shas[1]} NULL\n"
        f"{shas[2]} 40 FAM:zbot|8,CLASS:worm|2\n"
        f"{shas[3]} 35 FAM:zbot|5,FAM:reconyc|5\n"
        f"{shas[4]} NULL\n"
        f"{shas[5]} 30 FAM:zbot|4,CLASS:worm|1\n"
    )
    return {
        "dir": tmp_path,
        "shas": shas,
        "leaves": leaves,
        "meta": meta,
        "queries": queries,
        "tags": tags,
    }


def run(*argv):
    return main([str(a) for a in argv])


class TestBuildIndex:
    def test_writes_artifact(self, bank):
        out = bank["dir"] / "index.json"
        assert run("build-index", "--leaves", bank["leaves"], "--meta", bank["meta"], "--out", out) == 0
        artifact = json.loads(out.read_text())
        assert artifact["n_samples"] == 6
        assert artifact["n_trees"] == 4
        assert artifact["leaves_digest"].startswith("sha256:")

    def test_missing_file_exits_2(self, bank, capsys):
        missing = bank["dir"] / "nope.lsim"
        rc = run("build-index", "--leaves", missing, "--meta", bank["meta"], "--out", bank["dir"] / "i.json")
        assert rc == 2
        assert "nope.lsim" in capsys.readouterr().err

    def test_count_mismatch_exits_2(self, bank, capsys):
        short = bank["dir"] / "short.meta.jsonl"
        short.write_text((bank["meta"]).read_text().splitlines()[0] + "\n")
        rc = run("build-index", "--leaves", bank["leaves"], "--meta", short, "--out", bank["dir"] / "i.json")
        assert rc == 2
        assert "match" in capsys.readouterr().err

    def test_unknown_subset_exits_2(self, bank, capsys):
        rc = run("build-index", "--leaves", bank["leaves"], "--meta", bank["meta"],
                 "--out", bank["dir"] / "i.json", "--subsets", "bogus")
        assert rc == 2
        assert "subset" in capsys.readouterr().err

    def test_deterministic_flag_idempotent(self, bank):
        a, b = bank["dir"] / "a.json", bank["dir"] / "b.json"
        for out in (a, b):
            assert run(
                "build-index", "--leaves", bank["leaves"], "--meta", bank["meta"],
                "--out", out, "--deterministic",
            ) == 0
        assert a.read_bytes() == b.read_bytes()


def _build_index(bank, subsets=None, name="index.json"):
    out = bank["dir"] / name
    argv = ["build-index", "--leaves", bank["leaves"], "--meta", bank["meta"], "--out", out]
    if subsets:
        argv += ["--subsets", subsets]
    assert run(*argv) == 0
    return out


def _run_queries(bank, index, exclude_self=True, k=2, name="hits.jsonl"):
    out = bank["dir"] / name
    argv = [
        "query", "--index", index, "--queries", bank["queries"],
        "--top-k", k, "--out", out,
    ]
    if exclude_self:
        argv.append("--exclude-self")
    assert run(*argv) == 0
    return out


class TestQuery:
    def test_hits_match_oracle(self, bank):
        index = _build_index(bank)
        hits_path = _run_queries(bank, index, exclude_self=False, k=6)
        records = read_hits_jsonl(hits_path)
        matrix = read_leaf_matrix(bank["leaves"])
        for record, qrow in zip(records, (4, 5)):
            expected = oracle_top_k(matrix, matrix.row(qrow), 6)
            assert [h.sha for h in record.hits] == [bank["shas"][e.row] for e in expected]
            assert [h.score for h in record.hits] == [e.score for e in expected]

    def test_self_hit_dropped_with_flag(self, bank):
        index = _build_index(bank)
        with_self = read_hits_jsonl(_run_queries(bank, index, exclude_self=False, name="a.jsonl"))
        without = read_hits_jsonl(_run_queries(bank, index, exclude_self=True, name="b.jsonl"))
        assert with_self[0].hits[0].sha == bank["shas"][4]
        assert with_self[0].hits[0].score == 1.0
        assert all(h.sha != bank["shas"][4] for h in without[0].hits)

    def test_k_larger_than_bank_truncates(self, bank):
        index = _build_index(bank)
        records = read_hits_jsonl(_run_queries(bank, index, exclude_self=False, k=99))
        assert len(records[0].hits) == 6

    def test_subset_filter_restricts_kb(self, bank):
        index = _build_index(bank, subsets="train")
        records = read_hits_jsonl(_run_queries(bank, index, exclude_self=False, k=99))
        train_shas = {bank["shas"][i] for i in range(4)}
        for record in records:
            assert {h.sha for h in record.hits} == train_shas

    def test_stale_index_rejected(self, bank, capsys):
        index = _build_index(bank)
        write_leaf_matrix(LeafMatrix([[1, 2, 3, 4]] * 6), bank["leaves"])
        rc = run("query", "--index", index, "--queries", bank["queries"],
                 "--top-k", 1, "--out", bank["dir"] / "h.jsonl")
        assert rc == 2
        assert "stale" in capsys.readouterr().err

    def test_thread_env_does_not_change_output(self, bank, monkeypatch):
        index = _build_index(bank)
        one = _run_queries(bank, index, name="one.jsonl")
        monkeypatch.setenv("LEAFSIM_THREADS", "3")
        multi = _run_queries(bank, index, name="multi.jsonl")
        assert one.read_bytes() == multi.read_bytes()


class TestTagPipeline:
    def test_cooc_builds_expected_pairs(self, bank):
        out = bank["dir"] / "t.cooc.csv"
        assert run("cooc", "--tags", bank["tags"], "--out", out) == 0
        table = read_cooc_table(out)
        from leafsim import Tag, TagKind

        zbot = Tag(TagKind.FAM, "zbot")
        worm = Tag(TagKind.CLASS, "worm")
        assert table.freq(zbot) == 3
        assert table.freq(worm) == 2
        assert table.pair_count(zbot, worm) == 2

    def test_enrich_threshold_and_output(self, bank):
        cooc = bank["dir"] / "t.cooc.csv"
        run("cooc", "--tags", bank["tags"], "--out", cooc)
        out = bank["dir"] / "enriched.jsonl"
        assert run(
            "enrich", "--tags", bank["tags"], "--cooc", cooc,
            "--threshold", "0.9", "--out", out,
        ) == 0
        enriched = dict(read_enrichment_jsonl(out))
        from leafsim import Tag, TagKind

        zbot = Tag(TagKind.FAM, "zbot")
        worm = Tag(TagKind.CLASS, "worm")
        # worm co-occurs with zbot in every worm sample, so worm pulls zbot in
        assert enriched[bank["shas"][2]].get((worm, zbot)) == 1.0
        # zbot's partners are below 0.9, so zbot seeds nothing
        assert all(src != zbot for (src, _), _ in enriched[bank["shas"][2]].items())
        assert len(enriched[bank["shas"][0]]) == 0

    def test_rank_outputs_rankings(self, bank):
        cooc = bank["dir"] / "t.cooc.csv"
        run("cooc", "--tags", bank["tags"], "--out", cooc)
        out = bank["dir"] / "rankings.jsonl"
        assert run(
            "rank", "--tags", bank["tags"], "--cooc", cooc,
            "--threshold", "0.9", "--kind", "FAM", "--out", out,
        ) == 0
        rankings = dict(read_ranking_jsonl(out))
        assert rankings[bank["shas"][2]].names == ("zbot",)
        # sample 3: equal 0.5/0.5 scores, then (reconyc -> zbot, 1.0) adds
        # P(reconyc)=0.5 to zbot, lifting it to 1.0
        assert rankings[bank["shas"][3]].names == ("zbot", "reconyc")
        ranked = dict(rankings[bank["shas"][3]].ranked)
        from leafsim import Tag, TagKind

        assert ranked[Tag(TagKind.FAM, "zbot")] == pytest.approx(1.0)
        assert ranked[Tag(TagKind.FAM, "reconyc")] == pytest.approx(0.5)
        assert len(rankings[bank["shas"][0]]) == 0

    def test_prev_only_sample_enriched(self, bank):
        cooc = bank["dir"] / "t.cooc.csv"
        run("cooc", "--tags", bank["tags"], "--out", cooc)
        prev = bank["dir"] / "prev.csv"
        extra_sha = fake_sha("prev-only")
        prev.write_text(f"sha256,family\n{extra_sha},worm\n")
        out = bank["dir"] / "enriched.jsonl"
        # the sidecar family is a FAM tag, distinct from CLASS:worm
        assert run(
            "enrich", "--tags", bank["tags"], "--cooc", cooc,
            "--threshold", "0.0", "--prev", prev, "--out", out,
        ) == 0
        enriched = dict(read_enrichment_jsonl(out))
        assert extra_sha in enriched


def _full_eval_setup(bank):
    index = _build_index(bank)
    hits = _run_queries(bank, index, exclude_self=True, k=2)
    cooc = bank["dir"] / "t.cooc.csv"
    run("cooc", "--tags", bank["tags"], "--out", cooc)
    rankings = bank["dir"] / "rankings.jsonl"
    run("rank", "--tags", bank["tags"], "--cooc", cooc, "--threshold", "0.9",
        "--kind", "FAM", "--out", rankings)
    return hits, rankings


class TestEval:
    def test_label_homogeneity_report(self, bank):
        hits, _ = _full_eval_setup(bank)
        out = bank["dir"] / "report.json"
        assert run(
            "eval", "--protocol", "label-hom", "--scenario", "counterfactual",
            "--hits", hits, "--meta", bank["meta"], "-k", 2, "--out", out,
        ) == 0
        report = json.loads(out.read_text())
        # both queries retrieve only same-label neighbors in this bank
        assert report["groups"]["benign"]["mean"] == 2.0
        assert report["groups"]["malicious"]["mean"] == 2.0
        assert report["groups"]["all"]["std"] == 0.0

    def test_map_all_relevant_is_one(self, bank):
        hits, rankings = _full_eval_setup(bank)
        out = bank["dir"] / "map.json"
        assert run(
            "eval", "--protocol", "map", "--scenario", "counterfactual",
            "--hits", hits, "--meta", bank["meta"], "--rankings", rankings,
            "-k", 2, "--out", out,
        ) == 0
        report = json.loads(out.read_text())
        # benign query: no tags anywhere -> fully relevant
        assert report["groups"]["benign"]["map"] == 1.0
        assert 0.0 <= report["groups"]["malicious"]["map"] <= 1.0

    def test_nes_transposition_half(self, tmp_path):
        # dedicated two-sample world: query ranking [x, y], hit ranking [y, x]
        q_sha, h_sha = fake_sha("q"), fake_sha("h")
        meta = tmp_path / "m.meta.jsonl"
        write_sample_meta(
            [
                SampleMeta(0, h_sha, Label.MALICIOUS, Subset.TRAIN),
                SampleMeta(1, q_sha, Label.MALICIOUS, Subset.TEST),
            ],
            meta,
        )
        hits = tmp_path / "hits.jsonl"
        hits.write_text(
            json.dumps({"query_sha": q_sha, "hits": [{"sha": h_sha, "score": 1.0, "label": "malicious"}]})
            + "\n"
        )
        rankings = tmp_path / "rank.jsonl"
        rankings.write_text(
            json.dumps({"sha256": q_sha, "kind": "FAM",
                        "ranking": [{"tag": "FAM:x", "score": 2.0}, {"tag": "FAM:y", "score": 1.0}]})
            + "\n"
            + json.dumps({"sha256": h_sha, "kind": "FAM",
                          "ranking": [{"tag": "FAM:y", "score": 2.0}, {"tag": "FAM:x", "score": 1.0}]})
            + "\n"
        )
        out = tmp_path / "nes.json"
        assert run(
            "eval", "--protocol", "relevance", "--scenario", "counterfactual",
            "--fn", "nes", "--hits", hits, "--meta", meta, "--rankings", rankings,
            "-k", 1, "--out", out,
        ) == 0
        report = json.loads(out.read_text())
        assert report["groups"]["malicious"]["mean"] == 0.5

    def test_scenario_mismatch_rejected(self, bank, capsys):
        hits, rankings = _full_eval_setup(bank)
        rc = run(
            "eval", "--protocol", "map", "--scenario", "unsupervised",
            "--hits", hits, "--meta", bank["meta"], "--rankings", rankings,
            "-k", 2, "--out", bank["dir"] / "r.json",
        )
        assert rc == 2
        assert "subset" in capsys.readouterr().err

    def test_deterministic_eval_idempotent(self, bank):
        hits, rankings = _full_eval_setup(bank)
        outs = []
        for name in ("r1.json", "r2.json"):
            out = bank["dir"] / name
            assert run(
                "eval", "--protocol", "relevance", "--scenario", "counterfactual",
                "--fn", "iou", "--hits", hits, "--meta", bank["meta"],
                "--rankings", rankings, "-k", 2, "--out", out, "--deterministic",
            ) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_sampling_is_seeded(self, bank):
        hits, rankings = _full_eval_setup(bank)
        reports = []
        for name in ("s1.json", "s2.json"):
            out = bank["dir"] / name
            assert run(
                "eval", "--protocol", "map", "--scenario", "counterfactual",
                "--hits", hits, "--meta", bank["meta"], "--rankings", rankings,
                "-k", 2, "--sample", 1, "--seed", 7, "--out", out, "--deterministic",
            ) == 0
            reports.append(out.read_bytes())
        assert reports[0] == reports[1]
        assert json.loads(reports[0])["n_queries"] == 1


class TestUsageErrors:
    def test_unknown_protocol_exits_64(self, bank):
        with pytest.raises(SystemExit) as exc:
            run("eval", "--protocol", "bogus", "--scenario", "counterfactual",
                "--hits", "x", "--meta", "y", "-k", 1, "--out", "z")
        assert exc.value.code == 64

    def test_unknown_fn_exits_64(self, bank):
        with pytest.raises(SystemExit) as exc:
            run("eval", "--protocol", "relevance", "--fn", "cosine",
                "--scenario", "counterfactual", "--hits", "x", "--meta", "y",
                "-k", 1, "--out", "z")
        assert exc.value.code == 64

    def test_missing_rankings_for_map_exits_64(self, bank):
        with pytest.raises(SystemExit) as exc:
            run("eval", "--protocol", "map", "--scenario", "counterfactual",
                "--hits", "x", "--meta", "y", "-k", 1, "--out", "z")
        assert exc.value.code == 64

    def test_nonpositive_top_k_exits_64(self, bank):
        with pytest.raises(SystemExit) as exc:
            run("query", "--index", "i", "--queries", "q", "--top-k", 0, "--out", "o")
        assert exc.value.code == 64

    def test_missing_subcommand_exits_64(self):
        with pytest.raises(SystemExit) as exc:
            run()
        assert exc.value.code == 64
