//! Minimal static SVG figures: mesh plots, field plots, line charts.

use crate::mesh::MeshGraph;
use std::fmt::Write;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub fn palette(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

/// Viridis-like ramp for `t` in `[0, 1]`.
pub fn ramp(t: f64) -> String {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let c: Vec<u8> = (0..3)
        .map(|k| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub struct Canvas {
    width: f64,
    height: f64,
    body: String,
}

impl Canvas {
    pub fn new(width: f64, height: f64) -> Self {
        Self {
            width,
            height,
            body: String::new(),
        }
    }

    pub fn line(&mut self, a: [f64; 2], b: [f64; 2], stroke: &str, w: f64, dashed: bool) {
        let dash = if dashed { " stroke-dasharray=\"4 3\"" } else { "" };
        let _ = writeln!(
            self.body,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{stroke}\" stroke-width=\"{w}\"{dash}/>",
            a[0], a[1], b[0], b[1]
        );
    }

    pub fn circle(&mut self, c: [f64; 2], r: f64, fill: &str) {
        let _ = writeln!(self.body, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{r}\" fill=\"{fill}\"/>", c[0], c[1]);
    }

    pub fn polyline(&mut self, pts: &[[f64; 2]], stroke: &str, dashed: bool) {
        let dash = if dashed { " stroke-dasharray=\"4 3\"" } else { "" };
        let p: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", p[0], p[1])).collect();
        let _ = writeln!(
            self.body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.5\"{dash}/>",
            p.join(" ")
        );
    }

    pub fn text(&mut self, at: [f64; 2], size: f64, s: &str, anchor: &str) {
        let _ = writeln!(
            self.body,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"{size}\" font-family=\"sans-serif\" text-anchor=\"{anchor}\">{}</text>",
            at[0],
            at[1],
            escape(s)
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

/// Maps mesh coordinates (first two dims) into a panel.
struct Frame {
    origin: [f64; 2],
    scale: f64,
    lo: [f64; 2],
    hi_y: f64,
}

impl Frame {
    fn fit(graph: &MeshGraph, origin: [f64; 2], size: [f64; 2]) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for i in 0..graph.n_nodes() {
            let p = graph.position(i);
            for k in 0..2.min(graph.dim) {
                lo[k] = lo[k].min(f64::from(p[k]));
                hi[k] = hi[k].max(f64::from(p[k]));
            }
        }
        if graph.dim < 2 {
            lo[1] = 0.0;
            hi[1] = 0.0;
        }
        let span = [(hi[0] - lo[0]).max(1e-9), (hi[1] - lo[1]).max(1e-9)];
        let scale = (size[0] / span[0]).min(size[1] / span[1]);
        Self {
            origin,
            scale,
            lo,
            hi_y: hi[1],
        }
    }

    fn map(&self, graph: &MeshGraph, i: usize) -> [f64; 2] {
        let p = graph.position(i);
        let y = if graph.dim > 1 { f64::from(p[1]) } else { 0.0 };
        [
            self.origin[0] + (f64::from(p[0]) - self.lo[0]) * self.scale,
            self.origin[1] + (self.hi_y - y) * self.scale,
        ]
    }
}

/// Mesh edges in grey, optional highlighted edges, nodes coloured per `colors`.
pub fn mesh_plot(graph: &MeshGraph, colors: &[String], highlight: &[(usize, usize)], title: &str) -> String {
    let (w, h, m) = (640.0, 480.0, 30.0);
    let mut c = Canvas::new(w, h);
    let f = Frame::fit(graph, [m, m], [w - 2.0 * m, h - 2.0 * m]);
    for (a, b) in graph.undirected_edges() {
        c.line(f.map(graph, a), f.map(graph, b), "#c8c8c8", 0.6, false);
    }
    for &(a, b) in highlight {
        c.line(f.map(graph, a), f.map(graph, b), "#d62728", 0.8, true);
    }
    for i in 0..graph.n_nodes() {
        c.circle(f.map(graph, i), 2.5, &colors[i]);
    }
    c.text([w / 2.0, 18.0], 13.0, title, "middle");
    c.finish()
}

/// Side-by-side scalar field panels on the same mesh and colour scale.
pub fn field_panels(graph: &MeshGraph, panels: &[(String, Vec<f32>)], title: &str) -> String {
    let (pw, ph, m) = (360.0, 300.0, 24.0);
    let w = pw * panels.len().max(1) as f64;
    let mut c = Canvas::new(w, ph + 40.0);
    let vals = panels.iter().flat_map(|p| p.1.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = vals.fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = f64::from((hi - lo).max(1e-12));
    for (k, (name, values)) in panels.iter().enumerate() {
        let f = Frame::fit(graph, [k as f64 * pw + m, 40.0], [pw - 2.0 * m, ph - m]);
        for i in 0..graph.n_nodes() {
            c.circle(f.map(graph, i), 3.0, &ramp(f64::from(values[i] - lo) / span));
        }
        c.text([k as f64 * pw + pw / 2.0, 32.0], 12.0, name, "middle");
    }
    c.text([w / 2.0, 16.0], 13.0, &format!("{title}  [{lo:.3}, {hi:.3}]"), "middle");
    c.finish()
}

/// Line chart; `dashed` series are drawn as dashed lines.
pub fn line_chart(series: &[(String, Vec<[f64; 2]>, bool)], x_label: &str, y_label: &str, title: &str) -> String {
    let (w, h) = (640.0, 420.0);
    let (l, r, t, b) = (70.0, 180.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.1.iter()).filter(|p| p[0].is_finite() && p[1].is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = ((y1 - y0) * 0.08).max(1e-12);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let sy = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);
    let mut c = Canvas::new(w, h);
    c.line([l, h - b], [w - r, h - b], "black", 1.0, false);
    c.line([l, t], [l, h - b], "black", 1.0, false);
    for k in 0..=4 {
        let xv = x0 + (x1 - x0) * f64::from(k) / 4.0;
        let yv = y0 + (y1 - y0) * f64::from(k) / 4.0;
        c.text([sx(xv), h - b + 16.0], 10.0, &format!("{xv:.3}"), "middle");
        c.text([l - 6.0, sy(yv) + 3.0], 10.0, &format!("{yv:.4}"), "end");
    }
    for (k, (name, p, dashed)) in series.iter().enumerate() {
        let mapped: Vec<[f64; 2]> = p.iter().map(|q| [sx(q[0]), sy(q[1])]).collect();
        c.polyline(&mapped, palette(k), *dashed);
        for q in &mapped {
            c.circle(*q, 2.5, palette(k));
        }
        let ly = t + 14.0 * k as f64;
        c.line([w - r + 10.0, ly], [w - r + 30.0, ly], palette(k), 2.0, *dashed);
        c.text([w - r + 34.0, ly + 4.0], 10.0, name, "start");
    }
    c.text([(l + w - r) / 2.0, h - 12.0], 12.0, x_label, "middle");
    c.text([14.0, t - 14.0], 12.0, y_label, "start");
    c.text([w / 2.0, 18.0], 13.0, title, "middle");
    c.finish()
}
