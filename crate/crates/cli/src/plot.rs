//! Self-contained SVG heatmaps of success fractions over `(s, μ)`.

use anyhow::{bail, Context, Result};
use hihtp::experiments::{AGGREGATE_HEADER, DEMIX_AGGREGATE_HEADER};
use std::collections::BTreeMap;
use std::fmt::Write;

const CELL_W: usize = 44;
const CELL_H: usize = 30;
const LEFT: usize = 70;
const TOP: usize = 50;
const BOTTOM: usize = 60;
const LEGEND_W: usize = 90;

/// One `(M, N, S, n, σ)` slice; `M`, `N`, `S` are absent for single-user tables.
#[derive(Debug)]
pub struct Heatmap {
    demix: Option<(usize, usize, usize)>,
    n: usize,
    sigma: usize,
    values: BTreeMap<(usize, usize), f64>,
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: usize) -> Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    let raw = rec
        .get(i)
        .with_context(|| format!("line {line}: missing column {i}"))?;
    raw.trim()
        .parse()
        .with_context(|| format!("line {line}: cannot parse {raw:?}"))
}

/// Parses an aggregate CSV into heatmaps in order of first appearance.
pub fn parse_aggregate(text: &str) -> Result<Vec<Heatmap>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let header = header.join(",");
    let demix = if header == AGGREGATE_HEADER {
        false
    } else if header == DEMIX_AGGREGATE_HEADER {
        true
    } else {
        bail!("not an aggregate table header: {header:?}");
    };
    let offset = if demix { 3 } else { 0 };

    let mut maps: Vec<Heatmap> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.with_context(|| format!("line {line}"))?;
        let key = if demix {
            Some((
                field(&rec, 0, line)?,
                field(&rec, 1, line)?,
                field(&rec, 2, line)?,
            ))
        } else {
            None
        };
        let n: usize = field(&rec, offset, line)?;
        let sigma: usize = field(&rec, offset + 1, line)?;
        let s: usize = field(&rec, offset + 2, line)?;
        let mu: usize = field(&rec, offset + 3, line)?;
        let frac: f64 = field(&rec, offset + 5, line)?;
        if !(0.0..=1.0).contains(&frac) {
            bail!("line {line}: success fraction {frac} outside [0, 1]");
        }
        let idx = match maps
            .iter()
            .position(|m| m.demix == key && m.n == n && m.sigma == sigma)
        {
            Some(idx) => idx,
            None => {
                maps.push(Heatmap {
                    demix: key,
                    n,
                    sigma,
                    values: BTreeMap::new(),
                });
                maps.len() - 1
            }
        };
        if maps[idx].values.insert((s, mu), frac).is_some() {
            bail!("line {line}: duplicate cell s={s}, mu={mu}");
        }
    }
    if maps.is_empty() {
        bail!("aggregate table has no rows");
    }
    Ok(maps)
}

fn shade(frac: f64) -> String {
    let v = (frac * 255.0).round() as u8;
    format!("rgb({v},{v},{v})")
}

impl Heatmap {
    pub fn file_name(&self) -> String {
        match self.demix {
            Some((m, users, active)) => format!(
                "heatmap_M{m}_N{users}_S{active}_n{}_sigma{}.svg",
                self.n, self.sigma
            ),
            None => format!("heatmap_n{}_sigma{}.svg", self.n, self.sigma),
        }
    }

    fn title(&self) -> String {
        let base = format!("n = {}, σ = {}", self.n, self.sigma);
        match self.demix {
            Some((m, users, active)) => format!("M = {m}, N = {users}, S = {active}, {base}"),
            None => base,
        }
    }

    /// Columns are `μ`, rows are `s` with the smallest at the bottom; shade is black at 0, white at 1.
    pub fn to_svg(&self) -> String {
        let mut s_values: Vec<usize> = self.values.keys().map(|k| k.0).collect();
        s_values.dedup();
        let mut mu_values: Vec<usize> = self.values.keys().map(|k| k.1).collect();
        mu_values.sort_unstable();
        mu_values.dedup();
        let (cols, rows) = (mu_values.len(), s_values.len());
        let width = LEFT + cols * CELL_W + LEGEND_W;
        let height = TOP + rows * CELL_H + BOTTOM;
        let grid_bottom = TOP + rows * CELL_H;

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(
            svg,
            r#"<rect width="{width}" height="{height}" fill="white"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + cols * CELL_W / 2,
            self.title()
        );
        for (r, s) in s_values.iter().enumerate() {
            let y = grid_bottom - (r + 1) * CELL_H;
            for (c, mu) in mu_values.iter().enumerate() {
                let x = LEFT + c * CELL_W;
                match self.values.get(&(*s, *mu)) {
                    Some(&frac) => {
                        let _ = writeln!(
                            svg,
                            r#"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{}"><title>s={s}, mu={mu}: {frac}</title></rect>"#,
                            shade(frac)
                        );
                    }
                    None => {
                        let _ = writeln!(
                            svg,
                            r##"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="#d9534f" fill-opacity="0.25"/>"##
                        );
                    }
                }
            }
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="end">{s}</text>"#,
                LEFT - 6,
                y + CELL_H / 2 + 4
            );
        }
        for (c, mu) in mu_values.iter().enumerate() {
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">{mu}</text>"#,
                LEFT + c * CELL_W + CELL_W / 2,
                grid_bottom + 16
            );
        }
        let _ = writeln!(
            svg,
            r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            cols * CELL_W,
            rows * CELL_H
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">μ</text>"#,
            LEFT + cols * CELL_W / 2,
            grid_bottom + 40
        );
        let _ = writeln!(
            svg,
            r#"<text x="20" y="{}" text-anchor="middle" font-size="13">s</text>"#,
            TOP + rows * CELL_H / 2
        );

        let lx = LEFT + cols * CELL_W + 30;
        let lh = (rows * CELL_H).max(60);
        let _ = writeln!(
            svg,
            r#"<defs><linearGradient id="shade" x1="0" y1="1" x2="0" y2="0"><stop offset="0" stop-color="black"/><stop offset="1" stop-color="white"/></linearGradient></defs>"#
        );
        let _ = writeln!(
            svg,
            r#"<rect x="{lx}" y="{TOP}" width="14" height="{lh}" fill="url(#shade)" stroke="black"/>"#
        );
        let _ = writeln!(svg, r#"<text x="{}" y="{}">1</text>"#, lx + 20, TOP + 4);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">0</text>"#,
            lx + 20,
            TOP + lh + 4
        );
        svg.push_str("</svg>\n");
        svg
    }
}
