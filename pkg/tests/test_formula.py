"""Formula parsing, validation and error positions."""
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from scopfit.formula import BS_CODES, FormulaError, TermSpec, parse, validate

NAMES = st.sampled_from(["x", "z", "dur", "bmi", "x_2", "a.b"])
UNI_CODES = [c for c, (kind, _) in BS_CODES.items() if kind == "smooth" and not c.endswith("By")]
TENSOR_CODES = [c for c, (kind, _) in BS_CODES.items() if kind == "tensor"]


@st.composite
def terms(draw):
    kind = draw(st.sampled_from(["parametric", "smooth", "tensor", "re", "by"]))
    k = draw(st.none() | st.integers(3, 20))
    if kind == "parametric":
        return draw(NAMES)
    if kind == "re":
        return f"s({draw(NAMES)}, bs=re)"
    if kind == "tensor":
        a, b = draw(st.lists(NAMES, min_size=2, max_size=2, unique=True))
        code = draw(st.sampled_from(TENSOR_CODES))
        kk = "" if k is None else f", k={k}"
        return f"ti({a}, {b}{kk})" if code == "ti" else f"s({a}, {b}{kk}, bs={code})"
    if kind == "by":
        code = draw(st.sampled_from(["mpiBy", "mpdBy", "ps"]))
        return f"s({draw(NAMES)}, by={draw(NAMES)}, bs={code})"
    code = draw(st.sampled_from(UNI_CODES))
    kk = "" if k is None else f"k={k}, "
    return f"s({draw(NAMES)}, {kk}bs={code})"


@st.composite
def formulas(draw):
    ts = draw(st.lists(terms(), min_size=1, max_size=5, unique=True))
    ws = draw(st.sampled_from(["", " ", "  "]))
    return f"y{ws}~{ws}" + f"{ws}+{ws}".join(ts)


class TestParse:
    def test_smooth_and_parametric(self):
        s = parse("y ~ s(x, k=10, bs=mpi) + z")
        assert s.response == "y"
        assert s.terms == (TermSpec("smooth", ("x",), 10, "mpi"), TermSpec("parametric", ("z",)))
        assert s.terms[0].constraint == "increasing"

    def test_tensor_increasing_first(self):
        t = parse('ret ~ s(bmi, dur, bs="tismi")').terms[0]
        assert t.kind == "tensor"
        assert t.covariates == ("bmi", "dur")
        assert t.constraint == "increasing-first"

    def test_functional(self):
        t = parse('y ~ s(X, by=Z, bs="mpdBy")').terms[0]
        assert (t.kind, t.covariates, t.by, t.constraint) == ("functional", ("X",), "Z",
                                                              "decreasing-by")

    def test_whitespace_insensitive(self):
        assert parse("y~s(x,k=5,bs=mpi)+z") == parse("  y ~ s( x , k = 5 , bs = mpi ) + z ")

    def test_intercept_forms(self):
        assert parse("y ~ 1").terms == ()
        assert parse("y ~ 0 + x").intercept is False
        assert parse("y ~ x").intercept is True

    def test_labels(self):
        s = parse("y ~ s(x) + s(x2, bs=mpi) + s(X, by=Z, bs=mpdBy) + ti(a, b)")
        assert [t.label for t in s.terms] == ["s(x)", "s(x2).mpi", "s(X:Z).mpdBy", "ti(a,b)"]

    def test_family_link(self):
        assert parse("y ~ x", "binomial").link == "logit"
        with pytest.raises(ValueError, match="not available"):
            parse("y ~ x", "binomial", "log")


class TestErrors:
    @pytest.mark.parametrize("text,offset,token", [
        ("y ~ s(x, bs=qq)", 12, "qq"),
        ("y ~ s(x, k=3, k=4)", 14, "k"),
        ("y x", 2, "x"),
        ("y ~ x + x", 8, "x"),
    ])
    def test_positioned(self, text, offset, token):
        with pytest.raises(FormulaError) as info:
            parse(text)
        assert info.value.offset == offset
        assert info.value.token == token
        assert f"offset {offset}" in str(info.value)

    def test_expected_set(self):
        with pytest.raises(FormulaError) as info:
            parse("y x")
        assert info.value.expected == ("~",)

    def test_unexpected_end(self):
        with pytest.raises(FormulaError, match="end of input"):
            parse("y ~ s(x,")

    def test_small_k(self):
        with pytest.raises(FormulaError, match="at least 3"):
            parse("y ~ s(x, k=2)")

    def test_unexpected_character(self):
        with pytest.raises(FormulaError) as info:
            parse("y ~ x + é")
        assert info.value.offset == 8
        assert info.value.token == "é"


class TestValidate:
    schema = {"y": ("numeric", (200,)), "x": ("numeric", (200,)), "id": ("factor", (200,)),
              "Z": ("matrix", (200, 100)), "X": ("matrix", (200, 100)),
              "X99": ("matrix", (200, 99))}

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="matrix shape mismatch"):
            validate(parse("y ~ s(X99, by=Z, bs=mpdBy)"), self.schema)

    def test_random_effect_needs_factor(self):
        with pytest.raises(ValueError, match="factor"):
            validate(parse("y ~ s(x, bs=re)"), self.schema)

    def test_default_k(self):
        assert validate(parse("y ~ s(x)"), self.schema).terms[0].k == 10

    def test_unknown_column(self):
        with pytest.raises(ValueError, match="unknown column"):
            validate(parse("y ~ s(w)"), self.schema)

    def test_factor_where_numeric(self):
        with pytest.raises(ValueError, match="numeric expected"):
            validate(parse("y ~ s(id)"), self.schema)

    def test_functional_ok(self):
        t = validate(parse("y ~ s(X, by=Z, bs=mpdBy)"), self.schema).terms[0]
        assert t.k == 10


class TestProperties:
    @given(formulas())
    def test_round_trip(self, text):
        spec = parse(text)
        assert parse(str(spec)) == spec

    @given(formulas(), st.data())
    def test_error_offset_near_corruption(self, text, data):
        pos = data.draw(st.integers(0, len(text) - 1))
        ch = data.draw(st.sampled_from(list("~+(),=#1 ")))
        bad = text[:pos] + ch + text[pos + 1:]
        assume(bad != text)
        try:
            parse(bad)
        except FormulaError as e:
            longest = max(len(tok) for tok in bad.replace("(", " ").replace(")", " ")
                          .replace(",", " ").split()) if bad.strip() else 1
            assert e.offset is not None
            assert e.offset <= pos + longest
