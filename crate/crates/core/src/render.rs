//! SVG drawing of a document graph: segment boxes plus one outlined
//! rectangle per salient region, each region in its own stroke color.

use std::fmt::Write;

use crate::graph::DocumentGraph;

const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

/// Stroke color of region `i`; cycles through a fixed palette, then through
/// evenly spaced hues.
pub fn region_color(i: usize) -> String {
    if i < PALETTE.len() {
        PALETTE[i].to_string()
    } else {
        format!("hsl({},70%,40%)", (i * 137) % 360)
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Regions are drawn with `class="region"`, segments with `class="segment"`.
pub fn render_svg(graph: &DocumentGraph) -> String {
    let page = graph.page();
    let (w, h) = (page.width(), page.height());
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r##"<rect class="page" x="0" y="0" width="{w}" height="{h}" fill="#ffffff" stroke="#000000"/>"##);
    let mut region_of = vec![0; page.segments().len()];
    for (r, reg) in graph.regions().iter().enumerate() {
        for &m in &reg.member_segment_ids {
            region_of[m] = r;
        }
    }
    for (i, seg) in page.segments().iter().enumerate() {
        let b = seg.bbox;
        let _ = writeln!(
            s,
            r#"<rect class="segment" data-id="{i}" x="{}" y="{}" width="{}" height="{}" fill="{}" fill-opacity="0.15" stroke="none"><title>{}</title></rect>"#,
            b.x0,
            b.y0,
            b.width(),
            b.height(),
            region_color(region_of[i]),
            escape(&seg.text)
        );
    }
    for (r, reg) in graph.regions().iter().enumerate() {
        let b = reg.bbox;
        let _ = writeln!(
            s,
            r#"<rect class="region" data-id="{r}" x="{}" y="{}" width="{}" height="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            b.x0 - 2.0,
            b.y0 - 2.0,
            b.width() + 4.0,
            b.height() + 4.0,
            region_color(r)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Number of region rectangles in an SVG produced by [`render_svg`].
pub fn count_regions(svg: &str) -> usize {
    svg.matches(r#"class="region""#).count()
}
