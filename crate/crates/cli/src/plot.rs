//! Static SVG of the charge and plaquette histories, side by side.

use std::fmt::Write;

use lflow::hmc::ChainRecord;

const PANEL_W: f64 = 440.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn panel(svg: &mut String, x0: f64, title: &str, chains: &[Vec<f64>]) {
    let all = chains.iter().flatten().copied();
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else if lo.is_finite() {
        (lo - 0.5, lo + 0.5)
    } else {
        (0.0, 1.0)
    };
    let n = chains.iter().map(Vec::len).max().unwrap_or(0).max(2);
    let w = PANEL_W - 2.0 * MARGIN;
    let h = PANEL_H - 2.0 * MARGIN;
    let _ = writeln!(
        svg,
        r#"<g transform="translate({x0},0)"><rect x="{MARGIN}" y="{MARGIN}" width="{w}" height="{h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle">{title}</text>"#, PANEL_W / 2.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{hi:.4}</text>"#, MARGIN - 4.0, MARGIN + 4.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{lo:.4}</text>"#, MARGIN - 4.0, MARGIN + h);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="10">trajectory</text>"#, PANEL_W / 2.0, PANEL_H - 10.0);
    for (c, values) in chains.iter().enumerate() {
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = MARGIN + w * i as f64 / (n - 1) as f64;
                let y = MARGIN + h * (hi - v) / (hi - lo);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1" points="{}"/>"#,
            COLORS[c % COLORS.len()],
            pts.join(" ")
        );
    }
    svg.push_str("</g>\n");
}

pub fn history_svg(chains: &[Vec<ChainRecord>]) -> String {
    let q: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|r| r.charge as f64).collect()).collect();
    let p: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|r| r.avg_plaq).collect()).collect();
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{PANEL_H}" font-family="sans-serif" font-size="13">"#,
        2.0 * PANEL_W
    );
    svg.push('\n');
    panel(&mut svg, 0.0, "topological charge Q", &q);
    panel(&mut svg, PANEL_W, "average plaquette", &p);
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_chain_and_panel() {
        let rec = |q| ChainRecord {
            chain: 0,
            traj: 0,
            action: 0.0,
            avg_plaq: 0.5,
            charge: q,
            delta_h: 0.0,
            accepted: true,
        };
        let chains = vec![vec![rec(0), rec(1)], vec![rec(0), rec(0), rec(-1)]];
        let svg = history_svg(&chains);
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(!svg.contains("NaN"));
    }
}
