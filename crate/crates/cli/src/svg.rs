//! Static per-area chart: smoothed count mean with its 5-95% band and the
//! reported counts.

use std::fmt::Write;

use lagcast::smc::{DaySummary, Model};

const W: f64 = 800.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

pub fn chart(model: &Model, days: &[DaySummary]) -> String {
    let n = days.len().max(2);
    let reported: Vec<Option<f64>> = model.series.obs.iter().map(|o| o.map(|o| o.count as f64)).collect();
    let ymax = days
        .iter()
        .map(|d| d.x_q95 as f64)
        .chain(reported.iter().flatten().copied())
        .fold(1.0, f64::max)
        * 1.05;
    let px = |t: usize| PAD + (W - 2.0 * PAD) * t as f64 / (n - 1) as f64;
    let py = |v: f64| H - PAD - (H - 2.0 * PAD) * v / ymax;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="20" font-size="14">{}</text>"#,
        escape(&model.series.area_id)
    );

    let mut band = String::new();
    for (t, d) in days.iter().enumerate() {
        let _ = write!(band, "{:.1},{:.1} ", px(t), py(d.x_q95 as f64));
    }
    for (t, d) in days.iter().enumerate().rev() {
        let _ = write!(band, "{:.1},{:.1} ", px(t), py(d.x_q05 as f64));
    }
    let _ = writeln!(s, r##"<polygon points="{}" fill="#9ecae1" opacity="0.6"/>"##, band.trim_end());

    let mean: Vec<String> = days
        .iter()
        .enumerate()
        .map(|(t, d)| format!("{:.1},{:.1}", px(t), py(d.x_mean)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#08519c" stroke-width="2"/>"##,
        mean.join(" ")
    );
    for (t, y) in reported.iter().enumerate() {
        if let Some(y) = y {
            let _ = writeln!(s, r##"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="#d62728"/>"##, px(t), py(*y));
        }
    }

    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{:.0}</text>"#,
            PAD - 4.0,
            py(v) + 4.0,
            v
        );
    }
    if let (Some(first), Some(last)) = (days.first(), days.last()) {
        let _ = writeln!(s, r#"<text x="{PAD}" y="{}">{}</text>"#, H - PAD + 16.0, first.date);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            W - PAD,
            H - PAD + 16.0,
            last.date
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
