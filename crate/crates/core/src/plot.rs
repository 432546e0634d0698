//! Static SVG figures from trace CSVs.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::constraint::Consolidation;
use crate::error::{Error, Result};
use crate::trace_io::Table;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    AlphaTimeline,
    XySnapshots,
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha_timeline" => Ok(PlotKind::AlphaTimeline),
            "xy_snapshots" => Ok(PlotKind::XySnapshots),
            other => Err(Error::Usage(format!(
                "unknown plot kind `{other}` (expected alpha_timeline or xy_snapshots)"
            ))),
        }
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xlo: f64,
    xhi: f64,
    ylo: f64,
    yhi: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.x0 + (x - self.xlo) / (self.xhi - self.xlo) * self.w
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + self.h - (y - self.ylo) / (self.yhi - self.ylo) * self.h
    }

    fn polyline(&self, pts: impl Iterator<Item = (f64, f64)>) -> String {
        let mut s = String::new();
        for (x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let _ = write!(s, "{:.2},{:.2} ", self.px(x), self.py(y));
        }
        s.trim_end().to_string()
    }

    fn axes(&self, out: &mut String) {
        let _ = writeln!(
            out,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
            self.x0, self.y0, self.w, self.h
        );
        for (v, anchor, x, y) in [
            (self.xlo, "start", self.x0, self.y0 + self.h + 14.0),
            (self.xhi, "end", self.x0 + self.w, self.y0 + self.h + 14.0),
        ] {
            let _ = writeln!(out, r#"<text x="{x:.1}" y="{y:.1}" font-size="11" text-anchor="{anchor}">{v:.3}</text>"#);
        }
        for (v, y) in [(self.ylo, self.y0 + self.h), (self.yhi, self.y0 + 10.0)] {
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{y:.1}" font-size="11" text-anchor="end">{v:.3}</text>"#,
                self.x0 - 4.0
            );
        }
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// `alpha` with whichever of `rho_alpha`, `varrho`, `alpha_hat` the trace has,
/// plus `alpha_star` when an oracle table is given.
pub fn alpha_timeline(trace: &Table, oracle: Option<&Table>) -> Result<String> {
    let t = trace
        .column("t")
        .ok_or_else(|| Error::Usage("trace has no `t` column".into()))?;
    if !trace.has("alpha") {
        return Err(Error::Usage("trace has no `alpha` column".into()));
    }
    let mut curves: Vec<(&str, Vec<(f64, f64)>)> = Vec::new();
    for name in ["alpha", "rho_alpha", "varrho", "alpha_hat"] {
        if let Some(v) = trace.column(name) {
            curves.push((name, t.iter().copied().zip(v).collect()));
        }
    }
    if let Some(o) = oracle {
        match (o.column("t"), o.column("alpha_star")) {
            (Some(ot), Some(a)) => curves.push(("alpha_star", ot.into_iter().zip(a).collect())),
            _ => return Err(Error::Usage("oracle CSV needs `t` and `alpha_star` columns".into())),
        }
    }
    let (xlo, xhi) = padded_range(curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.0)));
    let (ylo, yhi) = padded_range(curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.1)));
    let f = Frame {
        x0: 60.0,
        y0: 20.0,
        w: 700.0,
        h: 340.0,
        xlo,
        xhi,
        ylo,
        yhi,
    };
    let mut out = svg_open(800.0, 400.0);
    f.axes(&mut out);
    if ylo < 0.0 && yhi > 0.0 {
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#bbb" stroke-dasharray="4 3"/>"##,
            f.x0,
            f.x0 + f.w,
            y = f.py(0.0)
        );
    }
    for (k, (name, pts)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<polyline id="{name}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            f.polyline(pts.iter().copied())
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" fill="{color}">{name}</text>"#,
            f.x0 + f.w - 90.0,
            f.y0 + 16.0 + 14.0 * k as f64
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Zero-level segments of a sampled field. `values[iy * nx + ix]` is the sample at
/// `(lo.0 + ix * dx, lo.1 + iy * dy)`.
pub fn marching_squares(
    values: &[f64],
    nx: usize,
    ny: usize,
    lo: (f64, f64),
    hi: (f64, f64),
) -> Vec<[(f64, f64); 2]> {
    let dx = (hi.0 - lo.0) / (nx - 1) as f64;
    let dy = (hi.1 - lo.1) / (ny - 1) as f64;
    let at = |ix: usize, iy: usize| values[iy * nx + ix];
    let mut segs = Vec::new();
    for iy in 0..ny - 1 {
        for ix in 0..nx - 1 {
            // Corners counter-clockwise from the lower left.
            let c = [
                (ix, iy),
                (ix + 1, iy),
                (ix + 1, iy + 1),
                (ix, iy + 1),
            ];
            let v = c.map(|(i, j)| at(i, j));
            if v.iter().any(|x| !x.is_finite()) {
                continue;
            }
            let mut crossings = Vec::with_capacity(4);
            for e in 0..4 {
                let (a, b) = (e, (e + 1) % 4);
                if (v[a] > 0.0) != (v[b] > 0.0) {
                    let s = v[a] / (v[a] - v[b]);
                    let (ia, ja) = c[a];
                    let (ib, jb) = c[b];
                    let x = lo.0 + dx * (ia as f64 + s * (ib as f64 - ia as f64));
                    let y = lo.1 + dy * (ja as f64 + s * (jb as f64 - ja as f64));
                    crossings.push((x, y));
                }
            }
            match crossings.len() {
                2 => segs.push([crossings[0], crossings[1]]),
                4 => {
                    // Saddle cell: pair edges using the center value.
                    let center = v.iter().sum::<f64>() / 4.0;
                    if (center > 0.0) == (v[0] > 0.0) {
                        segs.push([crossings[0], crossings[1]]);
                        segs.push([crossings[2], crossings[3]]);
                    } else {
                        segs.push([crossings[0], crossings[3]]);
                        segs.push([crossings[1], crossings[2]]);
                    }
                }
                _ => {}
            }
        }
    }
    segs
}

const CONTOUR_RES: usize = 81;

/// One panel per time: the `alpha = 0` contour and the `x1` path up to that time.
pub fn xy_snapshots(
    trace: &Table,
    cons: &Consolidation,
    times: &[f64],
    lo: (f64, f64),
    hi: (f64, f64),
) -> Result<String> {
    if cons.n() != 2 {
        return Err(Error::Usage(format!(
            "xy_snapshots needs a planar constraint set, this one has n = {}",
            cons.n()
        )));
    }
    let (t, x, y) = match (trace.column("t"), trace.column("x_1_1"), trace.column("x_1_2")) {
        (Some(t), Some(x), Some(y)) => (t, x, y),
        _ => return Err(Error::Usage("trace needs `t`, `x_1_1` and `x_1_2` columns".into())),
    };
    if times.is_empty() {
        return Err(Error::Usage("no snapshot times given".into()));
    }
    let size = 280.0;
    let gap = 30.0;
    let width = gap + times.len() as f64 * (size + gap);
    let mut out = svg_open(width, size + 70.0);
    for (k, &ts) in times.iter().enumerate() {
        let f = Frame {
            x0: gap + k as f64 * (size + gap),
            y0: 30.0,
            w: size,
            h: size,
            xlo: lo.0,
            xhi: hi.0,
            ylo: lo.1,
            yhi: hi.1,
        };
        let _ = writeln!(out, r#"<g class="panel" data-t="{ts}">"#);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="20" font-size="13">t = {ts}</text>"#,
            f.x0
        );
        f.axes(&mut out);
        let mut field = vec![0.0; CONTOUR_RES * CONTOUR_RES];
        for iy in 0..CONTOUR_RES {
            for ix in 0..CONTOUR_RES {
                let px = lo.0 + (hi.0 - lo.0) * ix as f64 / (CONTOUR_RES - 1) as f64;
                let py = lo.1 + (hi.1 - lo.1) * iy as f64 / (CONTOUR_RES - 1) as f64;
                field[iy * CONTOUR_RES + ix] = cons.alpha(ts, &[px, py])?;
            }
        }
        let mut d = String::new();
        for [a, b] in marching_squares(&field, CONTOUR_RES, CONTOUR_RES, lo, hi) {
            let _ = write!(
                d,
                "M{:.2},{:.2}L{:.2},{:.2}",
                f.px(a.0),
                f.py(a.1),
                f.px(b.0),
                f.py(b.1)
            );
        }
        let _ = writeln!(out, r##"<path class="contour" fill="none" stroke="#2ca02c" d="{d}"/>"##);
        let upto: Vec<usize> = (0..t.len()).filter(|&i| t[i] <= ts + 1e-12).collect();
        let path = f.polyline(upto.iter().map(|&i| (x[i], y[i])));
        let _ = writeln!(
            out,
            r##"<polyline class="path" fill="none" stroke="#1f77b4" points="{path}"/>"##
        );
        if let Some(&i) = upto.last() {
            let _ = writeln!(
                out,
                r##"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="#d62728"/>"##,
                f.px(x[i]),
                f.py(y[i])
            );
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}
