import numpy as np
import pytest
from hypothesis import given, strategies as st

from leafsim import (
    DimensionError,
    Label,
    LeafMatrix,
    ParseError,
    SampleMeta,
    ScoredTagList,
    Subset,
    Tag,
    TagKind,
    TagRanking,
    ValidationError,
    tag_parse,
)

NAME_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789:._-"

tag_names = st.text(alphabet=NAME_ALPHABET, min_size=1, max_size=12)
tags = st.builds(Tag, st.sampled_from(list(TagKind)), tag_names)


class TestTagParse:
    def test_family_token(self):
        assert tag_parse("FAM:swisyn") == Tag(TagKind.FAM, "swisyn")

    def test_subpath_name(self):
        assert tag_parse("FILE:os:windows") == Tag(TagKind.FILE, "os:windows")

    def test_bare_name_defaults_to_unk(self):
        assert tag_parse("zbot") == Tag(TagKind.UNK, "zbot")

    def test_name_is_lowercased(self):
        assert tag_parse("FAM:Swisyn") == Tag(TagKind.FAM, "swisyn")

    def test_lowercase_kind_prefix_accepted(self):
        assert tag_parse("fam:zbot") == Tag(TagKind.FAM, "zbot")

    @pytest.mark.parametrize("bad", ["", "FAM:", "os:windows", "FAMILY:zbot", "  "])
    def test_malformed_tokens(self, bad):
        with pytest.raises(ParseError):
            tag_parse(bad)

    @given(tags)
    def test_render_parse_roundtrip(self, tag):
        assert tag_parse(tag.render()) == tag

    @given(tags, tags)
    def test_equality_is_consistent(self, a, b):
        assert (a == b) == (a.kind == b.kind and a.name == b.name)
        if a == b:
            assert hash(a) == hash(b)


class TestTag:
    def test_identity_is_kind_plus_name(self):
        assert Tag(TagKind.FAM, "zbot") != Tag(TagKind.CLASS, "zbot")

    def test_uppercase_name_rejected(self):
        with pytest.raises(ValidationError):
            Tag(TagKind.FAM, "Zbot")

    @pytest.mark.parametrize("bad", ["", "a b", "a,b", "a|b"])
    def test_forbidden_names(self, bad):
        with pytest.raises(ValidationError):
            Tag(TagKind.FAM, bad)


class TestScoredTagList:
    def test_empty_is_valid(self):
        stl = ScoredTagList()
        assert len(stl) == 0
        assert stl.detections is None

    def test_duplicate_tag_rejected(self):
        t = Tag(TagKind.FAM, "zbot")
        with pytest.raises(ValidationError):
            ScoredTagList(((t, 5), (t, 2)))

    def test_nonpositive_score_rejected(self):
        with pytest.raises(ValidationError):
            ScoredTagList(((Tag(TagKind.FAM, "zbot"), 0),))

    def test_of_kind_filters(self):
        stl = ScoredTagList(
            (
                (Tag(TagKind.FAM, "a"), 5),
                (Tag(TagKind.CLASS, "worm"), 3),
                (Tag(TagKind.FAM, "b"), 2),
            )
        )
        assert [t.name for t, _ in stl.of_kind(TagKind.FAM)] == ["a", "b"]


class TestTagRanking:
    def test_from_scores_sorts_descending(self):
        scores = {
            Tag(TagKind.FAM, "a"): 0.8,
            Tag(TagKind.FAM, "b"): 0.2,
            Tag(TagKind.FAM, "c"): 0.76,
        }
        ranking = TagRanking.from_scores(TagKind.FAM, scores)
        assert ranking.names == ("a", "c", "b")

    def test_ties_break_by_ascending_name(self):
        scores = {Tag(TagKind.FAM, n): 0.5 for n in ("delta", "alpha", "beta")}
        ranking = TagRanking.from_scores(TagKind.FAM, scores)
        assert ranking.names == ("alpha", "beta", "delta")

    def test_reranking_is_deterministic(self):
        scores = {Tag(TagKind.FAM, f"t{i}"): (i * 7) % 3 for i in range(20)}
        first = TagRanking.from_scores(TagKind.FAM, scores)
        for _ in range(5):
            assert TagRanking.from_scores(TagKind.FAM, dict(scores)) == first

    def test_wrong_kind_rejected(self):
        with pytest.raises(ValidationError):
            TagRanking(TagKind.FAM, ((Tag(TagKind.CLASS, "worm"), 1.0),))

    def test_increasing_scores_rejected(self):
        with pytest.raises(ValidationError):
            TagRanking(
                TagKind.FAM,
                ((Tag(TagKind.FAM, "a"), 0.1), (Tag(TagKind.FAM, "b"), 0.9)),
            )

    def test_bad_tie_order_rejected(self):
        with pytest.raises(ValidationError):
            TagRanking(
                TagKind.FAM,
                ((Tag(TagKind.FAM, "b"), 0.5), (Tag(TagKind.FAM, "a"), 0.5)),
            )

    @given(
        st.dictionaries(
            tag_names, st.floats(min_value=0, max_value=10, allow_nan=False), max_size=8
        )
    )
    def test_total_deterministic_order(self, named_scores):
        scores = {Tag(TagKind.FAM, n): s for n, s in named_scores.items()}
        ranking = TagRanking.from_scores(TagKind.FAM, scores)
        values = [s for _, s in ranking]
        assert values == sorted(values, reverse=True)
        assert TagRanking.from_scores(TagKind.FAM, scores) == ranking


class TestSampleMeta:
    def test_basic(self):
        m = SampleMeta(0, "a" * 64, Label.MALICIOUS, Subset.TRAIN, "2018-11")
        assert m.label is Label.MALICIOUS

    def test_unlabeled_must_be_in_unlabeled_subset(self):
        with pytest.raises(ValidationError):
            SampleMeta(0, "a" * 64, Label.UNLABELED, Subset.TRAIN)
        with pytest.raises(ValidationError):
            SampleMeta(0, "a" * 64, Label.BENIGN, Subset.UNLABELED)

    def test_bad_sha_rejected(self):
        with pytest.raises(ValidationError):
            SampleMeta(0, "A" * 64, Label.BENIGN, Subset.TRAIN)
        with pytest.raises(ValidationError):
            SampleMeta(0, "a" * 63, Label.BENIGN, Subset.TRAIN)

    @pytest.mark.parametrize("bad", ["2018-13", "2018-00", "18-01", "2018/01"])
    def test_bad_appeared_rejected(self, bad):
        with pytest.raises(ValidationError):
            SampleMeta(0, "a" * 64, Label.BENIGN, Subset.TRAIN, bad)

    def test_label_int_mapping(self):
        assert Label.from_int(-1) is Label.UNLABELED
        assert Label.from_int(0) is Label.BENIGN
        assert Label.from_int(1) is Label.MALICIOUS
        with pytest.raises(ValidationError):
            Label.from_int(2)


class TestLeafMatrix:
    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            LeafMatrix(np.empty((0, 3), dtype=np.uint16))
        with pytest.raises(ValidationError):
            LeafMatrix(np.empty((3, 0), dtype=np.uint16))

    def test_negative_rejected(self):
        with pytest.raises(ValidationError):
            LeafMatrix([[1, -1]])

    def test_float_rejected(self):
        with pytest.raises(ValidationError):
            LeafMatrix([[1.5, 2.0]])

    def test_width_normalization(self):
        assert LeafMatrix([[65535]]).data.dtype == np.uint16
        assert LeafMatrix([[65536]]).data.dtype == np.uint32

    def test_too_wide_rejected(self):
        with pytest.raises(ValidationError):
            LeafMatrix([[2**32]])

    def test_immutable_after_construction(self):
        m = LeafMatrix([[1, 2], [3, 4]])
        with pytest.raises(ValueError):
            m.data[0, 0] = 9

    def test_1d_rejected(self):
        with pytest.raises(DimensionError):
            LeafMatrix([1, 2, 3])
