//! SVG rendering of one hand's hand-to-object field.

use rbf_core::boxfield::{AreaMask, RelationalBoxField};
use rbf_core::geometry::iou;
use rbf_core::scenes::Scene;
use rbf_core::BBox;
use std::fmt::Write;

const CELL: f64 = 16.0;

pub struct VizInput<'a> {
    pub scene: &'a Scene,
    pub hand: BBox,
    pub object: Option<BBox>,
    pub field: &'a RelationalBoxField,
    pub voted: Option<BBox>,
    /// Estimate after each applied step of the episode.
    pub estimates: Vec<BBox>,
    pub samples: usize,
}

/// Box in pixel-center coordinates to an SVG rectangle; pixel `(u, v)`
/// covers `[v, v+1) × [u, u+1)` on the canvas.
fn rect(out: &mut String, b: &BBox, style: &str) {
    let (x0, y0, _, _) = b.corners();
    let _ = writeln!(
        out,
        r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" {style}/>"#,
        (x0 + 0.5) * CELL,
        (y0 + 0.5) * CELL,
        b.w() * CELL,
        b.h() * CELL
    );
}

fn center(v: f64) -> f64 {
    (v + 0.5) * CELL
}

pub fn render(input: &VizInput<'_>) -> String {
    let (h, w) = input.field.grid();
    let (width, height) = (w as f64 * CELL, h as f64 * CELL);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" viewBox="0 0 {width} {}">"#,
        height + 24.0,
        height + 24.0
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{width}" height="{height}" fill="#f7f7f7"/>"##);

    let area = AreaMask::from_box(&input.hand, h, w);
    let c = input.field.confidence();

    // per-pixel IoU with the held object (confidence when there is none)
    let _ = writeln!(s, r#"<g id="heat">"#);
    for &(u, v) in area.pixels() {
        let value = match &input.object {
            Some(o) => iou(&input.field.predicted_box(u, v), o),
            None => c[u * w + v],
        };
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="#d7301f" fill-opacity="{:.3}"/>"##,
            v as f64 * CELL,
            u as f64 * CELL,
            value.clamp(0.0, 1.0)
        );
    }
    let _ = writeln!(s, "</g>");

    // evenly spaced predictions from the hand area
    let _ = writeln!(s, r#"<g id="samples">"#);
    let px = area.pixels();
    let n = input.samples.min(px.len());
    for k in 0..n {
        let (u, v) = px[k * px.len() / n];
        let b = input.field.predicted_box(u, v);
        let op = c[u * w + v].clamp(0.05, 1.0);
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#6a51a3" stroke-width="0.6" stroke-opacity="{op:.3}"/>"##,
            center(v as f64),
            center(u as f64),
            center(b.cx()),
            center(b.cy())
        );
        rect(&mut s, &b, &format!(r##"fill="none" stroke="#6a51a3" stroke-width="0.4" stroke-opacity="{:.3}""##, op * 0.5));
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g id="annotations">"#);
    for other in input.scene.hands.iter().filter(|&o| *o != input.hand) {
        rect(&mut s, other, r##"fill="none" stroke="#9ecae1" stroke-width="1" data-role="other-hand""##);
    }
    for o in &input.scene.objects {
        rect(&mut s, o, r##"fill="none" stroke="#a1d99b" stroke-width="1" data-role="object""##);
    }
    rect(&mut s, &input.hand, r##"fill="none" stroke="#2171b5" stroke-width="2" data-role="hand""##);
    if let Some(o) = &input.object {
        rect(&mut s, o, r##"fill="none" stroke="#238b45" stroke-width="2" stroke-dasharray="4 2" data-role="held-object""##);
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g id="episode">"#);
    for e in &input.estimates {
        rect(&mut s, e, r##"fill="none" stroke="#737373" stroke-width="1" stroke-dasharray="2 2" data-role="estimate""##);
    }
    if let Some(v) = &input.voted {
        rect(&mut s, v, r##"fill="none" stroke="#fd8d3c" stroke-width="2" data-role="vote""##);
    }
    let _ = writeln!(s, "</g>");

    let label = match (&input.voted, &input.object) {
        (Some(v), Some(o)) => format!("scene {} vote IoU {:.3}", input.scene.id, iou(v, o)),
        (Some(_), None) => format!("scene {} hand holds nothing", input.scene.id),
        (None, _) => format!("scene {} no vote", input.scene.id),
    };
    let _ = writeln!(
        s,
        r#"<text x="4" y="{:.1}" font-family="monospace" font-size="12">{label}</text>"#,
        height + 16.0
    );
    s.push_str("</svg>\n");
    s
}
