//! Minimal SVG charts.

use std::fmt::Write as _;

use super::{DistanceOverlapReport, MetricsReport, SweepRow};

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    format!(r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" ")) + "\n"
}

/// Intra- and inter-instance distance histograms, normalized, on shared bins.
pub fn distance_histogram(report: &DistanceOverlapReport, title: &str) -> String {
    let mut s = header(title);
    let b = report.bins() as f64;
    let norm = |h: &[u64]| {
        let total: u64 = h.iter().sum();
        h.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect::<Vec<_>>()
    };
    let (pi, pe) = (norm(&report.intra), norm(&report.inter));
    let top = pi.iter().chain(&pe).copied().fold(1e-12, f64::max);
    let bw = (W - 2.0 * PAD) / b;
    for (h, color) in [(&pi, "#1f77b4"), (&pe, "#d62728")] {
        for (k, &v) in h.iter().enumerate() {
            let height = v / top * (H - 2.0 * PAD);
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{bw:.2}" height="{height:.2}" fill="{color}" fill-opacity="0.5"/>"#,
                PAD + k as f64 * bw,
                H - PAD - height
            );
        }
    }
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}">0</text>"#, H - PAD + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, W - PAD, H - PAD + 14.0, report.max_distance);
    let _ = writeln!(s, r##"<text x="{}" y="40" fill="#1f77b4">intra</text>"##, W - PAD - 120.0);
    let _ = writeln!(s, r##"<text x="{}" y="40" fill="#d62728">inter</text>"##, W - PAD - 70.0);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">distance (overlap {:.4})</text>"#,
        W / 2.0,
        H - 12.0,
        report.overlap_probability
    );
    s.push_str("</svg>\n");
    s
}

/// Overlap rate (left axis) and oracle precision (right axis) against `n_s`.
pub fn sweep_chart(rows: &[SweepRow], title: &str) -> String {
    let mut s = header(title);
    if rows.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let lo = rows.iter().map(|r| r.n_s).min().unwrap_or(0) as f64;
    let hi = rows.iter().map(|r| r.n_s).max().unwrap_or(1) as f64;
    let x = |n: usize| PAD + if hi > lo { (n as f64 - lo) / (hi - lo) } else { 0.5 } * (W - 2.0 * PAD);
    let rate_top = rows.iter().map(|r| r.overlap_rate).fold(1e-12, f64::max);
    let y = |v: f64, top: f64| H - PAD - v / top * (H - 2.0 * PAD);
    let rate: Vec<(f64, f64)> = rows.iter().map(|r| (x(r.n_s), y(r.overlap_rate, rate_top))).collect();
    let prec: Vec<(f64, f64)> = rows.iter().map(|r| (x(r.n_s), y(r.oracle_mprec, 1.0))).collect();
    s.push_str(&polyline(&rate, "#1f77b4"));
    s.push_str(&polyline(&prec, "#2ca02c"));
    let _ = writeln!(s, r#"<path d="M{} {PAD} V{}" stroke="black"/>"#, W - PAD, H - PAD);
    for r in rows {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, x(r.n_s), H - PAD + 14.0, r.n_s);
    }
    let _ = writeln!(s, r##"<text x="4" y="{PAD}" fill="#1f77b4">{rate_top:.3}</text>"##);
    let _ = writeln!(s, r##"<text x="{}" y="{PAD}" fill="#2ca02c">1.0</text>"##, W - PAD + 4.0);
    let _ = writeln!(s, r##"<text x="{}" y="40" fill="#1f77b4">overlap rate</text>"##, PAD + 8.0);
    let _ = writeln!(s, r##"<text x="{}" y="40" fill="#2ca02c">oracle mPrec</text>"##, PAD + 100.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">n_s</text>"#, W / 2.0, H - 12.0);
    s.push_str("</svg>\n");
    s
}

/// Bars for the scene metrics, each AP threshold and the AP average, on [0, 1].
pub fn metrics_bars(report: &MetricsReport, title: &str) -> String {
    let mut s = header(title);
    let mut bars: Vec<(String, f64)> =
        vec![("mCov".into(), report.mcov), ("mWCov".into(), report.mwcov), ("mPrec".into(), report.mprec), ("mRec".into(), report.mrec)];
    bars.extend(report.ap_thresholds.iter().zip(&report.ap).map(|(t, v)| (format!("{t:.2}"), *v)));
    bars.push(("mAP".into(), report.map_avg));
    let slot = (W - 2.0 * PAD) / bars.len() as f64;
    for (k, (label, v)) in bars.iter().enumerate() {
        let height = v.clamp(0.0, 1.0) * (H - 2.0 * PAD);
        let x = PAD + k as f64 * slot;
        let color = if k < 4 { "#1f77b4" } else { "#ff7f0e" };
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{height:.2}" fill="{color}"/>"#,
            x + 0.1 * slot,
            H - PAD - height,
            0.8 * slot
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="9">{}</text>"#,
            x + 0.5 * slot,
            H - PAD + 14.0,
            escape(label)
        );
    }
    let _ = writeln!(s, r#"<text x="4" y="{PAD}">1.0</text>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">AP by IoU threshold in orange</text>"#, W / 2.0, H - 12.0);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let r = DistanceOverlapReport { max_distance: 1.0, intra: vec![3, 1], inter: vec![0, 4], overlap_probability: 0.25 };
        let h = distance_histogram(&r, "a < b");
        assert!(h.starts_with("<svg") && h.trim_end().ends_with("</svg>") && h.contains("a &lt; b"));
        assert!(sweep_chart(&[], "empty").ends_with("</svg>\n"));
        let m = MetricsReport {
            scenes: 1,
            mcov: 1.0,
            mwcov: 1.0,
            mprec: 0.5,
            mrec: 0.5,
            empty_scenes: 0,
            ap_thresholds: vec![0.25, 0.5],
            ap: vec![1.0, 0.5],
            map_avg: 0.5,
            per_class_ap: Default::default(),
        };
        assert_eq!(metrics_bars(&m, "m").matches("<rect").count(), 1 + 7);
    }
}
