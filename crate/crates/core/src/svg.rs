//! Minimal SVG scatter-plot writer: points, axes with ticks, legend.

use std::fmt::Write as _;

const WIDTH: f32 = 640.0;
const HEIGHT: f32 = 480.0;
const MARGIN_L: f32 = 70.0;
const MARGIN_R: f32 = 150.0;
const MARGIN_T: f32 = 40.0;
const MARGIN_B: f32 = 55.0;
const COLORS: [&str; 6] = ["#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f32, f32)>,
}

#[derive(Debug, Clone)]
pub struct ScatterPlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn nice_range(lo: f32, hi: f32) -> (f32, f32) {
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.08;
    (lo - pad, hi + pad)
}

impl ScatterPlot {
    pub fn render(&self) -> String {
        let all: Vec<(f32, f32)> = self.series.iter().flat_map(|s| s.points.iter().copied()).collect();
        let (mut xlo, mut xhi, mut ylo, mut yhi) = (0.0f32, 1.0, 0.0, 1.0);
        if !all.is_empty() {
            xlo = all.iter().map(|p| p.0).fold(f32::INFINITY, f32::min);
            xhi = all.iter().map(|p| p.0).fold(f32::NEG_INFINITY, f32::max);
            ylo = all.iter().map(|p| p.1).fold(f32::INFINITY, f32::min);
            yhi = all.iter().map(|p| p.1).fold(f32::NEG_INFINITY, f32::max);
        }
        let (xlo, xhi) = nice_range(xlo, xhi);
        let (ylo, yhi) = nice_range(ylo, yhi);
        let px = |x: f32| MARGIN_L + (x - xlo) / (xhi - xlo) * (WIDTH - MARGIN_L - MARGIN_R);
        let py = |y: f32| HEIGHT - MARGIN_B - (y - ylo) / (yhi - ylo) * (HEIGHT - MARGIN_T - MARGIN_B);

        let mut s = String::new();
        let _ = writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
        );
        let _ = writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>",
            WIDTH / 2.0,
            escape(&self.title)
        );
        // axes
        let (x0, x1) = (MARGIN_L, WIDTH - MARGIN_R);
        let (y0, y1) = (HEIGHT - MARGIN_B, MARGIN_T);
        let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
        let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
        for i in 0..=4 {
            let t = i as f32 / 4.0;
            let xv = xlo + t * (xhi - xlo);
            let yv = ylo + t * (yhi - ylo);
            let xp = px(xv);
            let yp = py(yv);
            let _ = writeln!(s, "<line x1=\"{xp}\" y1=\"{y0}\" x2=\"{xp}\" y2=\"{}\" stroke=\"black\"/>", y0 + 5.0);
            let _ = writeln!(
                s,
                "<text x=\"{xp}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{xv:.3}</text>",
                y0 + 18.0
            );
            let _ = writeln!(s, "<line x1=\"{}\" y1=\"{yp}\" x2=\"{x0}\" y2=\"{yp}\" stroke=\"black\"/>", x0 - 5.0);
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\">{yv:.3}</text>",
                x0 - 8.0,
                yp + 4.0
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">{}</text>",
            (x0 + x1) / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 {})\">{}</text>",
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(&self.y_label)
        );
        // points
        for (si, series) in self.series.iter().enumerate() {
            let color = COLORS[si % COLORS.len()];
            for &(x, y) in &series.points {
                let _ = writeln!(
                    s,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"{color}\" fill-opacity=\"0.75\"/>",
                    px(x),
                    py(y)
                );
            }
        }
        // legend
        let lx = WIDTH - MARGIN_R + 15.0;
        for (si, series) in self.series.iter().enumerate() {
            let color = COLORS[si % COLORS.len()];
            let ly = MARGIN_T + 10.0 + si as f32 * 20.0;
            let _ = writeln!(s, "<circle cx=\"{lx}\" cy=\"{ly}\" r=\"4\" fill=\"{color}\"/>");
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" font-size=\"12\">{}</text>",
                lx + 10.0,
                ly + 4.0,
                escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
