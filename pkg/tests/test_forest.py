import io
import json

import numpy as np
import pytest

from gwiforest.errors import ConfigError, ResourceLimitError, ViolationError
from gwiforest.forest import (
    ColoredForest,
    extend_forest_batch,
    from_jsonl,
    generate_forest,
    generate_forest_batch,
    to_jsonl,
    vertex_census,
)
from gwiforest.laws import Law, parse_law
from gwiforest.scaling import OffspringEnsemble


def _ensemble_n1(mu="dirac(0)", nu="dirac(0)", roots=(1,)):
    return OffspringEnsemble(
        mu=((parse_law(mu),),), nu=(parse_law(nu),), roots=roots
    )


def _ensemble_n2():
    # mild subcritical pair with cross-breeding and immigration
    g = parse_law("geometric(0.6)")     # mean 2/3
    p = parse_law("poisson(0.3)")
    z = parse_law("dirac(0)")
    return OffspringEnsemble(
        mu=((g, p), (p, g)),
        nu=(parse_law("poisson(0.8)"), parse_law("poisson(0.5)")),
        roots=(2, 1),
    )


class TestDegenerateShapes:
    def test_all_dirac_zero_gives_bare_spine_plus_roots(self):
        f = generate_forest(_ensemble_n1(), h_max=3, seed=0)
        assert f.size == 5
        assert f.colors.tolist() == [1, 0, 0, 0, 0]
        assert f.parents.tolist() == [-1, -1, 1, 2, 3]
        assert f.heights.tolist() == [0, 0, 1, 2, 3]
        assert f.roots == (1,)
        assert f.root_vector == (1, 1)
        f.validate()

    def test_unary_chain(self):
        f = generate_forest(_ensemble_n1(mu="dirac(1)"), h_max=4, seed=0)
        # one type-1 chain and the spine, in parallel
        assert f.size == 10
        census = vertex_census(f)
        assert census[0].tolist() == [1, 1, 1, 1, 1]
        assert census[1].tolist() == [1, 1, 1, 1, 1]
        f.validate()

    def test_h_max_zero_is_roots_only(self):
        f = generate_forest(_ensemble_n1(mu="poisson(5.0)", roots=(3,)), 0, seed=1)
        assert f.size == 4
        assert f.heights.tolist() == [0, 0, 0, 0]
        assert f.colors.tolist() == [1, 1, 1, 0]
        f.validate()

    def test_bad_arguments(self):
        with pytest.raises(ConfigError):
            generate_forest(_ensemble_n1(), h_max=-1)
        with pytest.raises(ConfigError):
            generate_forest_batch(_ensemble_n1(), h_max=2, n_forests=0)


class TestDeterminism:
    def test_same_seed_same_batch(self):
        ens = _ensemble_n2()
        a = generate_forest_batch(ens, 6, 7, seed=42)
        b = generate_forest_batch(ens, 6, 7, seed=42)
        assert all(x == y for x, y in zip(a, b))

    def test_different_seed_differs(self):
        ens = _ensemble_n2()
        a = generate_forest_batch(ens, 6, 7, seed=42)
        b = generate_forest_batch(ens, 6, 7, seed=43)
        assert any(x != y for x, y in zip(a, b))

    def test_single_forest_is_batch_of_one(self):
        ens = _ensemble_n2()
        assert generate_forest(ens, 5, seed=9) == generate_forest_batch(ens, 5, 1, seed=9)[0]


class TestInvariants:
    def test_random_forests_validate(self):
        ens = _ensemble_n2()
        for f in generate_forest_batch(ens, 8, 50, seed=7):
            f.validate()

    def test_heights_follow_parents(self):
        f = generate_forest(_ensemble_n2(), 8, seed=3)
        child = np.flatnonzero(f.parents >= 0)
        assert np.all(f.heights[child] == f.heights[f.parents[child]] + 1)

    def test_sibling_color_order(self):
        # children of one parent: colors ascending with 0 mapped last
        f = generate_forest(_ensemble_n2(), 8, seed=11)
        key = np.where(f.colors == 0, f.n_types + 1, f.colors)
        for v in range(f.size):
            kids = np.flatnonzero(f.parents == v)
            assert np.all(np.diff(key[kids]) >= 0)

    def test_spine_is_single_file(self):
        f = generate_forest(_ensemble_n2(), 8, seed=13)
        spine = np.flatnonzero(f.colors == 0)
        assert spine.size == f.h_max + 1
        assert f.heights[spine].tolist() == list(range(f.h_max + 1))
        # each spine vertex is the previous one's child
        assert np.all(f.parents[spine[1:]] == spine[:-1])

    def test_validate_catches_corruption(self):
        f = generate_forest(_ensemble_n2(), 6, seed=17)
        c = f.colors.copy()
        p = f.parents.copy()
        h = f.heights.copy()

        bad = ColoredForest(c, p.copy(), np.concatenate([h[1:], h[:1]]), f.n_types, f.h_max)
        with pytest.raises(ViolationError):
            bad.validate()

        p2 = p.copy()
        child = int(np.flatnonzero(p >= 0)[-1])
        p2[child] = child + 1 if child + 1 < f.size else child
        bad = ColoredForest(c.copy(), p2, h.copy(), f.n_types, f.h_max)
        with pytest.raises(ViolationError):
            bad.validate()

        c2 = c.copy()
        c2[0] = f.n_types + 3
        bad = ColoredForest(c2, p.copy(), h.copy(), f.n_types, f.h_max)
        with pytest.raises(ViolationError, match="vertex 0"):
            bad.validate()


class TestMoments:
    def test_first_layer_means_match_laws(self):
        # type-1 parents breed poisson(0.7), spine immigrates poisson(1.3)
        ens = _ensemble_n1(mu="poisson(0.7)", nu="poisson(1.3)")
        n = 10_000
        batch = generate_forest_batch(ens, 1, n, seed=101)
        bred = np.empty(n)
        imm = np.empty(n)
        for i, f in enumerate(batch):
            at1 = f.heights == 1
            par_color = np.where(f.parents >= 0, f.colors[np.maximum(f.parents, 0)], -1)
            bred[i] = np.count_nonzero(at1 & (f.colors == 1) & (par_color == 1))
            imm[i] = np.count_nonzero(at1 & (f.colors == 1) & (par_color == 0))
        for got, want in ((bred.mean(), 0.7), (imm.mean(), 1.3)):
            se = np.sqrt(want / n)
            assert abs(got - want) < 4 * se

    def test_census_counts_every_vertex(self):
        f = generate_forest(_ensemble_n2(), 7, seed=23)
        census = vertex_census(f)
        assert census.shape == (3, 8)
        assert census.sum() == f.size
        assert np.all(census[0] == 1)


class TestBudget:
    def test_binary_blowup_trips_the_limit(self):
        ens = _ensemble_n1(mu="dirac(2)")
        with pytest.raises(ResourceLimitError):
            generate_forest(ens, h_max=25, seed=0, max_vertices=1000)

    def test_budget_is_per_forest(self):
        # 40 small forests together exceed 1000 vertices but none alone does
        ens = _ensemble_n1(mu="dirac(1)")
        batch = generate_forest_batch(ens, 20, 40, seed=0, max_vertices=1000)
        assert len(batch) == 40
        assert sum(f.size for f in batch) > 1000


class TestExtend:
    def test_extension_keeps_the_prefix_and_validates(self):
        ens = _ensemble_n2()
        rng = np.random.default_rng(31)
        base = generate_forest_batch(ens, 3, 5, seed=rng)
        deeper = extend_forest_batch(base, ens, 7, rng)
        for f0, f1 in zip(base, deeper):
            assert f1.h_max == 7
            f1.validate()
            m = f0.size
            assert f1.colors[:m].tolist() == f0.colors.tolist()
            assert f1.parents[:m].tolist() == f0.parents.tolist()
            assert f1.heights[:m].tolist() == f0.heights.tolist()

    def test_extension_matches_single_shot_law(self):
        # extending to depth 4 draws from the same laws as generating at 4:
        # compare census means over many forests
        ens = _ensemble_n1(mu="geometric(0.55)", nu="poisson(0.9)")
        n = 4000
        one_shot = generate_forest_batch(ens, 4, n, seed=71)
        rng = np.random.default_rng(72)
        two_step = extend_forest_batch(
            generate_forest_batch(ens, 2, n, seed=rng), ens, 4, rng
        )
        a = np.mean([vertex_census(f)[1, 4] for f in one_shot])
        b = np.mean([vertex_census(f)[1, 4] for f in two_step])
        sd = np.std([vertex_census(f)[1, 4] for f in one_shot]) / np.sqrt(n)
        assert abs(a - b) < 6 * sd

    def test_extend_rejects_bad_targets(self):
        ens = _ensemble_n2()
        base = generate_forest_batch(ens, 3, 2, seed=1)
        with pytest.raises(ConfigError):
            extend_forest_batch(base, ens, 3, np.random.default_rng(0))
        mixed = [base[0], generate_forest(ens, 4, seed=2)]
        with pytest.raises(ConfigError):
            extend_forest_batch(mixed, ens, 9, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            extend_forest_batch(base, _ensemble_n1(), 9, np.random.default_rng(0))
        assert extend_forest_batch([], ens, 9, np.random.default_rng(0)) == []


class TestSerde:
    def test_round_trip(self):
        f = generate_forest(_ensemble_n2(), 6, seed=5)
        buf = io.StringIO()
        to_jsonl(f, buf)
        buf.seek(0)
        g = from_jsonl(buf)
        assert f == g

    def test_round_trip_via_file(self, tmp_path):
        f = generate_forest(_ensemble_n2(), 4, seed=6)
        path = str(tmp_path / "forest.jsonl")
        to_jsonl(f, path)
        assert from_jsonl(path) == f

    def test_corrupted_parent_names_the_vertex(self):
        f = generate_forest(_ensemble_n2(), 5, seed=8)
        buf = io.StringIO()
        to_jsonl(f, buf)
        lines = buf.getvalue().splitlines()
        victim = f.size - 1
        row = json.loads(lines[victim])
        row["parent"] = victim  # self-parent: not an earlier vertex
        lines[victim] = json.dumps(row)
        with pytest.raises(ViolationError, match=f"vertex {victim}"):
            from_jsonl(io.StringIO("\n".join(lines)))

    def test_schema_errors(self):
        with pytest.raises(ConfigError):
            from_jsonl(io.StringIO("not json\n"))
        with pytest.raises(ConfigError):
            from_jsonl(io.StringIO('{"index": 0, "color": 1}\n'))
        with pytest.raises(ConfigError):
            from_jsonl(io.StringIO(""))
        # gap in the index sequence
        rows = [
            {"index": 0, "color": 1, "parent": None, "height": 0},
            {"index": 2, "color": 0, "parent": None, "height": 0},
        ]
        text = "\n".join(json.dumps(r) for r in rows)
        with pytest.raises(ConfigError):
            from_jsonl(io.StringIO(text))

    def test_arrays_are_frozen(self):
        f = generate_forest(_ensemble_n2(), 3, seed=4)
        with pytest.raises(ValueError):
            f.colors[0] = 2
