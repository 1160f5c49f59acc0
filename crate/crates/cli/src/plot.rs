//! Minimal SVG line chart for per-epoch CSV logs.
//!
//! The first column is the x axis; every other column becomes one polyline,
//! min-max scaled to the plot height. The legend lists each series' range.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Header row plus numeric rows; at least one series column.
pub fn log_to_svg(csv: &str) -> Result<String, String> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or("empty log")?.split(',').collect();
    if header.len() < 2 {
        return Err("log needs an x column and at least one series".into());
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, l) in lines.enumerate() {
        let row = l
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format!("row {}: {e}", n + 2))?;
        if row.len() != header.len() {
            return Err(format!("row {}: {} fields, header has {}", n + 2, row.len(), header.len()));
        }
        rows.push(row);
    }
    let range = |col: usize| {
        let (lo, hi) = rows
            .iter()
            .map(|r| r[col])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if rows.is_empty() {
            (0.0, 1.0)
        } else {
            (lo, hi)
        }
    };
    let (x_lo, x_hi) = range(0);
    let sx = |x: f64| {
        let span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
        MARGIN + (x - x_lo) / span * (WIDTH - 2.0 * MARGIN)
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(header[0])
    );
    let _ = writeln!(s, r#"<text x="{x0}" y="{}" font-size="10">{x_lo}</text>"#, y0 + 14.0);
    let _ = writeln!(s, r#"<text x="{x1}" y="{}" font-size="10" text-anchor="end">{x_hi}</text>"#, y0 + 14.0);

    for (i, name) in header.iter().enumerate().skip(1) {
        let (lo, hi) = range(i);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let color = COLORS[(i - 1) % COLORS.len()];
        let points: Vec<String> = rows
            .iter()
            .map(|r| {
                let y = y0 - (r[i] - lo) / span * (y0 - y1);
                format!("{:.2},{:.2}", sx(r[0]), y)
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{} [{lo}, {hi}]</text>"#,
            x0 + 8.0,
            y1 + 14.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_series() {
        let svg = log_to_svg("epoch,lr,train_loss,val_mA\n0,0.02,0.9,0.5\n1,0.02,0.8,0.6\n").unwrap();
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn rejects_malformed_rows() {
        assert!(log_to_svg("").is_err());
        assert!(log_to_svg("epoch\n0\n").is_err());
        assert!(log_to_svg("epoch,lr\n0,abc\n").is_err());
        assert!(log_to_svg("epoch,lr\n0\n").is_err());
    }

    #[test]
    fn constant_series_stays_finite() {
        let svg = log_to_svg("epoch,lr\n0,0.02\n").unwrap();
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
