"""Model-formula mini-language.

Grammar (whitespace-insensitive)::

    formula := ident "~" term ("+" term)*
    term    := ident | "1" | "0" | call
    call    := ("s" | "ti" | "re") "(" ident ("," ident)* ("," name "=" value)* ")"
    name    := "k" | "bs" | "by"

``bs`` values may be quoted or bare.  Codes follow the public names of the
R package ``scam`` (``mpi``, ``mpd``, ``tismi``, ``mpdBy``, ...).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

__all__ = [
    "BS_CODES",
    "FormulaError",
    "ModelSpec",
    "TermSpec",
    "format_formula",
    "parse",
    "validate",
]

DEFAULT_K = 10
DEFAULT_TENSOR_K = 5

#: bs code -> (kind, constraint)
BS_CODES = {
    "ps": ("smooth", "unconstrained"),
    "cr": ("smooth", "unconstrained"),
    "mpi": ("smooth", "increasing"),
    "mpd": ("smooth", "decreasing"),
    "cx": ("smooth", "convex"),
    "cv": ("smooth", "concave"),
    "mpiBy": ("smooth", "increasing-by"),
    "mpdBy": ("smooth", "decreasing-by"),
    "cxBy": ("smooth", "convex-by"),
    "cvBy": ("smooth", "concave-by"),
    "re": ("random_effect", "unconstrained"),
    "tismi": ("tensor", "increasing-first"),
    "tismd": ("tensor", "decreasing-first"),
    "tedmi": ("tensor", "increasing/increasing"),
    "tedmd": ("tensor", "decreasing/decreasing"),
    "tesmi1": ("tensor", "increasing/none"),
    "tesmi2": ("tensor", "none/increasing"),
    "tesmd1": ("tensor", "decreasing/none"),
    "tesmd2": ("tensor", "none/decreasing"),
    "ti": ("tensor", "none"),
}

FAMILY_LINKS = {
    "gaussian": ("identity", "log"),
    "binomial": ("logit",),
    "poisson": ("log", "identity"),
}


class FormulaError(ValueError):
    """Syntax or semantic error in a formula, with the byte offset of the culprit."""

    def __init__(self, message: str, offset: int | None = None, expected=(), token: str | None = None):
        self.offset = offset
        self.expected = tuple(sorted(expected))
        self.token = token
        text = message
        if offset is not None:
            text = f"{message} at offset {offset}"
        if self.expected:
            text += f" (expected one of: {', '.join(self.expected)})"
        super().__init__(text)


@dataclass(frozen=True)
class TermSpec:
    kind: str
    covariates: tuple[str, ...]
    k: int | None = None
    bs: str | None = None
    by: str | None = None
    offset: int = field(default=0, compare=False)

    @property
    def label(self) -> str:
        if self.kind == "parametric":
            return self.covariates[0]
        head = "ti" if self.bs == "ti" else "s"
        inner = ",".join(self.covariates)
        if self.by:
            inner += f":{self.by}"
        if self.bs and self.bs not in ("ps", "ti"):
            return f"{head}({inner}).{self.bs}"
        return f"{head}({inner})"

    @property
    def constraint(self) -> str:
        return BS_CODES[self.bs][1] if self.bs else "unconstrained"

    def __str__(self) -> str:
        if self.kind == "parametric":
            return self.covariates[0]
        head = "ti" if self.bs == "ti" else "s"
        args = list(self.covariates)
        if self.k is not None:
            args.append(f"k={self.k}")
        if self.bs is not None and self.bs != "ti":
            args.append(f"bs={self.bs}")
        if self.by is not None:
            args.append(f"by={self.by}")
        return f"{head}({', '.join(args)})"


@dataclass(frozen=True)
class ModelSpec:
    response: str
    terms: tuple[TermSpec, ...]
    intercept: bool = True
    family: str = "gaussian"
    link: str | None = None

    def __post_init__(self):
        if self.family not in FAMILY_LINKS:
            raise ValueError(f"unknown family {self.family!r}")
        link = self.link or FAMILY_LINKS[self.family][0]
        if link not in FAMILY_LINKS[self.family]:
            raise ValueError(f"link {link!r} is not available for family {self.family!r}")
        object.__setattr__(self, "link", link)

    def __str__(self) -> str:
        return format_formula(self)


def format_formula(spec: ModelSpec) -> str:
    parts = [str(t) for t in spec.terms]
    if not spec.intercept:
        parts.insert(0, "0")
    elif not parts:
        parts = ["1"]
    return f"{spec.response} ~ {' + '.join(parts)}"


_TOKEN = re.compile(
    r"""(?P<ws>\s+)
      | (?P<ident>[A-Za-z_.][A-Za-z0-9_.]*)
      | (?P<int>[0-9]+)
      | (?P<string>"[^"]*"|'[^']*')
      | (?P<op>[~+(),=])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            ch = text[pos]
            if ch in "\"'":
                raise FormulaError("unterminated string", _byte_offset(text, pos), token=ch)
            raise FormulaError(f"unexpected character {ch!r}", _byte_offset(text, pos), token=ch)
        kind = m.lastgroup
        if kind != "ws":
            val = m.group()
            toks.append(_Tok(val if kind == "op" else kind, val, _byte_offset(text, pos)))
        pos = m.end()
    toks.append(_Tok("eof", "", _byte_offset(text, len(text))))
    return toks


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def cur(self) -> _Tok:
        return self.toks[self.i]

    def fail(self, expected, tok: _Tok | None = None):
        tok = tok or self.cur
        shown = "end of input" if tok.kind == "eof" else repr(tok.text)
        raise FormulaError(f"unexpected {shown}", tok.pos, expected, tok.text)

    def expect(self, kind: str) -> _Tok:
        tok = self.cur
        if tok.kind != kind:
            self.fail({kind})
        self.i += 1
        return tok

    def formula(self) -> tuple[str, list[TermSpec], bool]:
        response = self.expect("ident").text
        self.expect("~")
        terms: list[TermSpec] = []
        intercept = True
        constant_seen = False
        while True:
            tok = self.cur
            if tok.kind == "int":
                if tok.text not in ("0", "1"):
                    raise FormulaError("only 0 or 1 may appear as a constant term", tok.pos,
                                       token=tok.text)
                if constant_seen:
                    raise FormulaError("intercept specified twice", tok.pos, token=tok.text)
                constant_seen = True
                intercept = tok.text == "1"
                self.i += 1
            else:
                terms.append(self.term())
            if self.cur.kind == "+":
                self.i += 1
                continue
            if self.cur.kind != "eof":
                self.fail({"+", "eof"})
            return response, terms, intercept

    def term(self) -> TermSpec:
        tok = self.cur
        if tok.kind != "ident":
            self.fail({"ident", "int"})
        self.i += 1
        if self.cur.kind != "(":
            return TermSpec("parametric", (tok.text,), offset=tok.pos)
        if tok.text not in ("s", "ti", "re"):
            raise FormulaError(f"unknown smooth constructor {tok.text!r}", tok.pos,
                               {"s", "ti", "re"}, tok.text)
        return self.call(tok)

    def call(self, head: _Tok) -> TermSpec:
        self.expect("(")
        covs = [self.expect("ident").text]
        named: dict[str, tuple[object, _Tok]] = {}
        while self.cur.kind == ",":
            self.i += 1
            name = self.expect("ident")
            if self.cur.kind != "=":
                if named:
                    self.fail({"="})
                covs.append(name.text)
                continue
            self.i += 1
            if name.text in named:
                raise FormulaError(f"duplicate argument {name.text!r}", name.pos, token=name.text)
            if name.text == "k":
                v = self.expect("int")
                named["k"] = (int(v.text), v)
            elif name.text == "bs":
                v = self.cur
                if v.kind not in ("ident", "string"):
                    self.fail({"ident", "string"})
                self.i += 1
                code = v.text.strip("\"'") if v.kind == "string" else v.text
                if code not in BS_CODES:
                    raise FormulaError(f"unknown bs code {code!r}", v.pos, token=code)
                named["bs"] = (code, v)
            elif name.text == "by":
                named["by"] = (self.expect("ident").text, name)
            else:
                raise FormulaError(f"unknown argument {name.text!r}", name.pos,
                                   {"k", "bs", "by"}, name.text)
        self.expect(")")

        k = named.get("k", (None, None))[0]
        bs = named.get("bs", (None, None))[0]
        by = named.get("by", (None, None))[0]
        if head.text == "ti":
            if bs not in (None, "ti"):
                raise FormulaError("ti() does not take a bs code", named["bs"][1].pos, token=bs)
            bs = "ti"
        elif head.text == "re":
            if bs not in (None, "re"):
                raise FormulaError("re() does not take a bs code", named["bs"][1].pos, token=bs)
            bs = "re"
        elif bs is None:
            bs = "ps"
        kind = BS_CODES[bs][0]
        if kind == "tensor" and len(covs) != 2:
            raise FormulaError(f"bs={bs} needs exactly two covariates", head.pos, token=head.text)
        if kind != "tensor" and len(covs) != 1:
            raise FormulaError("only tensor terms take more than one covariate", head.pos,
                               token=head.text)
        if k is not None and k < 3:
            raise FormulaError("k must be at least 3", named["k"][1].pos, token=str(k))
        if kind == "random_effect" and by is not None:
            raise FormulaError("random effects do not take by", head.pos, token=head.text)
        if kind == "tensor" and by is not None:
            raise FormulaError("tensor terms do not take by", head.pos, token=head.text)
        if by is not None:
            kind = "functional"
        return TermSpec(kind, tuple(covs), k, bs, by, offset=head.pos)


def parse(text: str, family: str = "gaussian", link: str | None = None) -> ModelSpec:
    """Parse formula ``text`` into a :class:`ModelSpec`.

    Raises :class:`FormulaError` carrying the byte offset of the offending
    token and the set of tokens that would have been accepted there.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    p = _Parser(text)
    response, terms, intercept = p.formula()
    seen = {}
    for t in terms:
        if t in seen:
            raise FormulaError(f"duplicate term {t.label!r}", t.offset, token=t.label)
        seen[t] = True
    return ModelSpec(response, tuple(terms), intercept, family, link)


def validate(spec: ModelSpec, schema: dict) -> ModelSpec:
    """Check a spec against a data schema and fill in defaults.

    ``schema`` maps column names to ``(kind, shape)`` with kind one of
    ``numeric``, ``factor`` or ``matrix``.
    """
    def need(name):
        if name not in schema:
            raise ValueError(f"unknown column {name!r}")
        return schema[name]

    rkind, _ = need(spec.response)
    if rkind != "numeric":
        raise ValueError(f"response {spec.response!r} must be numeric")
    out = []
    for t in spec.terms:
        kinds = [need(c)[0] for c in t.covariates]
        if t.kind == "parametric":
            if kinds[0] == "matrix":
                raise ValueError(f"matrix column {t.covariates[0]!r} used as a parametric term")
            out.append(t)
            continue
        if t.kind == "random_effect":
            if kinds[0] != "factor":
                raise ValueError(f"random effect {t.covariates[0]!r} needs a factor column")
            out.append(t)
            continue
        if t.kind == "tensor":
            if any(k != "numeric" for k in kinds):
                raise ValueError(f"tensor term {t.label} needs numeric covariates")
            k = t.k if t.k is not None else DEFAULT_TENSOR_K
            out.append(replace(t, k=k))
            continue
        k = t.k if t.k is not None else DEFAULT_K
        if t.kind == "functional":
            bkind, bshape = need(t.by)
            if kinds[0] == "matrix":
                if bkind != "matrix":
                    raise ValueError("matrix covariate needs a matrix by-variable")
                if tuple(bshape) != tuple(schema[t.covariates[0]][1]):
                    raise ValueError(
                        f"matrix shape mismatch: {t.covariates[0]} {tuple(schema[t.covariates[0]][1])}"
                        f" vs {t.by} {tuple(bshape)}")
            elif kinds[0] == "numeric":
                if bkind != "numeric":
                    raise ValueError(f"by-variable {t.by!r} must be numeric")
            else:
                raise ValueError(f"factor {t.covariates[0]!r} where numeric expected")
            out.append(replace(t, k=k))
            continue
        if kinds[0] != "numeric":
            raise ValueError(f"factor {t.covariates[0]!r} where numeric expected")
        if t.bs.endswith("By"):
            raise ValueError(f"bs={t.bs} needs a by-variable")
        out.append(replace(t, k=k))
    return replace(spec, terms=tuple(out))
