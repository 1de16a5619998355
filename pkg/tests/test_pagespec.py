"""Page file parsing: directives, block structure, unit JSON bodies."""

import pytest

from forwardlite.errors import (
    SyntaxError_,
    UnitSchemaViolation,
    UnknownUnitClass,
)
from forwardlite.pagespec import (
    Bind,
    Define,
    Event,
    For,
    If,
    JFor,
    JHtml,
    JInit,
    JObject,
    JOutput,
    Output,
    Text,
    Unit,
    With,
    parse_page,
)


def items_of(text):
    return parse_page(text, "p", filename="p.html").body


def only(text, cls):
    found = [it for it in items_of(text) if isinstance(it, cls)]
    assert len(found) == 1
    return found[0]


class TestDirectives:
    def test_plain_html_is_text(self):
        items = items_of("<h1>Hello</h1>")
        assert [type(i) for i in items] == [Text]
        assert items[0].text == "<h1>Hello</h1>"

    def test_output(self):
        out = only("<p><%= book.title %></p>", Output)
        assert out.query is not None

    def test_with_scopes_remainder(self):
        w = only("<% with v as (select t.a from db.t t) %><%= v %>", With)
        assert w.name == "v"
        assert any(isinstance(i, Output) for i in w.body)

    def test_define(self):
        d = only("<div><% define q string %><%= q %></div>", Define)
        assert (d.name, d.kind) == ("q", "string")

    def test_define_kind_checked(self):
        with pytest.raises(SyntaxError_, match="unknown define kind"):
            items_of("<% define q rowset %>")

    def test_bind_inside_tag(self):
        b = only("<input <% bind q %>>", Bind)
        assert b.name == "q" and b.init is None

    def test_bind_with_init(self):
        b = only("<input <% bind q init 12 %>>", Bind)
        assert b.init is not None

    def test_event(self):
        e = only("<button <% event click ajax /save %>>go</button>", Event)
        assert (e.dom, e.method, e.url) == ("click", "ajax", "/save")

    def test_event_with_args(self):
        e = only("<a <% event click get /show with id = x.k %>>x</a>", Event)
        assert e.url == "/show"
        assert [name for name, _ in e.args] == ["id"]

    def test_event_method_checked(self):
        with pytest.raises(SyntaxError_, match="ajax"):
            items_of("<button <% event click teleport /go %>></button>")

    def test_for_block(self):
        f = only("<% for r in (select t.a from db.t t) %><%= r.a %><% end %>",
                 For)
        assert f.var == "r"

    def test_if_else(self):
        node = only("<% if (1 = 1) %>yes<% else %>no<% end %>", If)
        assert any(isinstance(i, Text) for i in node.then)
        assert any(isinstance(i, Text) for i in node.orelse)

    def test_empty_directive(self):
        with pytest.raises(SyntaxError_, match="empty"):
            items_of("<% %>")

    def test_unknown_directive(self):
        with pytest.raises(SyntaxError_, match="unknown directive"):
            items_of("<% splice x %>")


class TestBlockStructure:
    def test_unclosed_for(self):
        with pytest.raises(SyntaxError_, match="unclosed"):
            items_of("<% for r in (select t.a from db.t t) %>x")

    def test_stray_end(self):
        with pytest.raises(SyntaxError_, match="without an open block"):
            items_of("x<% end %>")

    def test_content_directive_inside_tag_rejected(self):
        with pytest.raises(SyntaxError_, match="inside a tag"):
            items_of("<div <%= t.a %>>x</div>")

    def test_bind_outside_tag_rejected(self):
        with pytest.raises(SyntaxError_, match="inside an element tag"):
            items_of("<p><% bind q %></p>")

    def test_event_outside_tag_rejected(self):
        with pytest.raises(SyntaxError_, match="inside an element tag"):
            items_of("<% event click ajax /go %>")

    def test_init_outside_unit_rejected(self):
        with pytest.raises(SyntaxError_, match="unit body"):
            items_of("<p><% init 12 %></p>")

    def test_unterminated_island(self):
        with pytest.raises(SyntaxError_, match="missing '%>'"):
            items_of("<p><% if (1 = 1) </p>")

    def test_error_position_is_line_and_col(self):
        with pytest.raises(SyntaxError_) as exc:
            items_of("line one\n  <% bogus %>")
        assert str(exc.value).startswith("p.html:2:3")


UNIT = """<% unit demo.map.Markers %>
{
  "zoom": <% init 12 %>,
  "markers": [
    <% for l in (select t.a as lat, t.b as lng from db.t t) %>
    { "lat": <%= l.lat %>, "lng": <%= l.lng %>,
      "infowindow": <% html %><b><%= l.lat %></b><% end %> }
    <% end %>
  ]
}
<% end %>"""


class TestUnitBodies:
    def test_unit_parses_to_json_tree(self):
        u = only(UNIT, Unit)
        assert u.class_name == "demo.map.Markers"
        assert isinstance(u.body, JObject)
        fields = dict(u.body.fields)
        assert isinstance(fields["zoom"], JInit)
        arr = fields["markers"]
        row = arr.items[0]
        assert isinstance(row, JFor)
        obj = row.body
        inner = dict(obj.fields)
        assert isinstance(inner["lat"], JOutput)
        assert isinstance(inner["infowindow"], JHtml)

    def test_unknown_unit_class(self):
        with pytest.raises(UnknownUnitClass, match="demo.map.Markers"):
            items_of("<% unit demo.missing.Widget %>{}<% end %>")

    def test_required_field_enforced(self):
        with pytest.raises(UnitSchemaViolation, match="markers"):
            items_of('<% unit demo.map.Markers %>{"zoom": 1}<% end %>')

    def test_unknown_field_rejected(self):
        with pytest.raises(UnitSchemaViolation, match="wat"):
            items_of('<% unit demo.map.Markers %>'
                     '{"wat": 1, "markers": []}<% end %>')

    def test_body_must_be_strict_json(self):
        with pytest.raises(SyntaxError_, match="field name"):
            items_of("<% unit demo.map.Markers %>{markers: []}<% end %>")

    def test_trailing_comma_rejected(self):
        with pytest.raises(SyntaxError_):
            items_of('<% unit demo.map.Markers %>{"markers": [],}<% end %>')

    def test_html_only_inside_unit(self):
        with pytest.raises(SyntaxError_, match="unit body"):
            items_of("<p><% html %>x<% end %></p>")


class TestLocations:
    def test_loc_points_into_file(self):
        w = only("\n\n<% with v as (select t.a from db.t t) %>ok", With)
        assert w.loc.startswith("p.html:3:")

    def test_query_errors_name_the_page_file(self):
        with pytest.raises(SyntaxError_, match="p.html"):
            items_of("<% with v as (select from) %>x")
