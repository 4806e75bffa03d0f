//! Markdown tables from the results CSV.
//!
//! Rows are grouped by augmentation (`base` for protocols without one),
//! each protocol's metrics are averaged over its seeds, and every column
//! marks the best mean in bold and the second-best distinct mean underlined.
//! Ranking uses the displayed four-decimal values, so equal-looking cells
//! always carry the same mark.

use std::collections::BTreeMap;
use std::path::Path;

use adaptlab_core::metrics::TABLE_COLUMNS;
use adaptlab_core::protocols::{augment_tokens, TABLE_AUGMENTATIONS};

use crate::error::{HarnessError, Result};
use crate::run::{read_results, ResultRow};

/// Only the calibration column prefers smaller values.
const LOWER_IS_BETTER: [bool; 5] = [false, true, false, false, false];

pub const BASE_GROUP: &str = "base";

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolMean {
    pub protocol: String,
    pub seeds: usize,
    /// Means in table column order.
    pub values: [f64; 5],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub name: String,
    pub rows: Vec<ProtocolMean>,
}

/// Augmentation group of a protocol name; unparsable names form their own group.
pub fn group_of(protocol: &str) -> String {
    match augment_tokens(protocol) {
        Ok(tokens) if tokens.is_empty() => BASE_GROUP.to_string(),
        Ok(tokens) => tokens
            .into_iter()
            .map(|t| match t {
                "noise" => "augmix-analog",
                "cutout" => "randaug-analog",
                other => other,
            })
            .collect::<Vec<_>>()
            .join("+"),
        Err(_) => "other".to_string(),
    }
}

fn group_rank(name: &str) -> (usize, &str) {
    if name == BASE_GROUP {
        return (0, name);
    }
    match TABLE_AUGMENTATIONS.iter().position(|a| *a == name) {
        Some(i) => (1 + i, name),
        None => (1 + TABLE_AUGMENTATIONS.len(), name),
    }
}

/// Stage tokens in upper case, as in the published tables: `(LP+vat)+(FT+mixup)`.
pub fn display_name(protocol: &str) -> String {
    let mut out = String::with_capacity(protocol.len());
    let mut token = String::new();
    let flush = |token: &mut String, out: &mut String| {
        match token.as_str() {
            "lp" | "ft" => out.push_str(&token.to_uppercase()),
            _ => out.push_str(token),
        }
        token.clear();
    };
    for ch in protocol.chars() {
        if matches!(ch, '+' | '(' | ')') {
            flush(&mut token, &mut out);
            out.push(ch);
        } else {
            token.push(ch);
        }
    }
    flush(&mut token, &mut out);
    out
}

/// Averages rows per protocol and groups them. Protocols keep the order of
/// their first appearance in `rows`.
pub fn summarize(rows: &[ResultRow]) -> Result<Vec<Group>> {
    if rows.is_empty() {
        return Err(HarnessError::Config("results file has no rows".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut by_protocol: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for row in rows {
        let bucket = by_protocol.entry(&row.protocol).or_default();
        if bucket.is_empty() {
            order.push(&row.protocol);
        }
        bucket.push(row);
    }

    let mut groups: BTreeMap<(usize, String), Vec<ProtocolMean>> = BTreeMap::new();
    for protocol in order {
        let bucket = &by_protocol[protocol];
        if bucket.iter().any(|r| r.config_hash != bucket[0].config_hash) {
            return Err(HarnessError::Config(format!(
                "protocol `{protocol}` has rows from more than one configuration"
            )));
        }
        let mut values = [0.0; 5];
        for row in bucket {
            for (acc, v) in values.iter_mut().zip(row.metrics()) {
                *acc += v;
            }
        }
        for v in &mut values {
            *v /= bucket.len() as f64;
        }
        let name = group_of(protocol);
        let (rank, _) = group_rank(&name);
        groups.entry((rank, name)).or_default().push(ProtocolMean {
            protocol: protocol.to_string(),
            seeds: bucket.len(),
            values,
        });
    }
    Ok(groups
        .into_iter()
        .map(|((_, name), rows)| Group { name, rows })
        .collect())
}

fn cell_text(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "n/a".to_string()
    }
}

/// Best and second-best distinct displayed values of one column.
fn podium(cells: &[String], lower_is_better: bool) -> (Option<f64>, Option<f64>) {
    let mut values: Vec<f64> = cells.iter().filter_map(|c| c.parse::<f64>().ok()).collect();
    values.sort_by(f64::total_cmp);
    if !lower_is_better {
        values.reverse();
    }
    values.dedup();
    (values.first().copied(), values.get(1).copied())
}

pub fn render_group(group: &Group) -> String {
    let mut out = format!("### {}\n\n", group.name);
    out.push_str(&format!("| Protocol | {} |\n", TABLE_COLUMNS.join(" | ")));
    out.push_str("|---|---:|---:|---:|---:|---:|\n");

    let cells: Vec<Vec<String>> = group
        .rows
        .iter()
        .map(|r| r.values.iter().map(|&v| cell_text(v)).collect())
        .collect();
    let podiums: Vec<(Option<f64>, Option<f64>)> = (0..5)
        .map(|c| {
            let column: Vec<String> = cells.iter().map(|r| r[c].clone()).collect();
            podium(&column, LOWER_IS_BETTER[c])
        })
        .collect();

    for (row, texts) in group.rows.iter().zip(&cells) {
        let marked: Vec<String> = texts
            .iter()
            .zip(&podiums)
            .map(|(text, &(best, second))| match text.parse::<f64>().ok() {
                Some(v) if Some(v) == best => format!("**{text}**"),
                Some(v) if Some(v) == second => format!("<u>{text}</u>"),
                _ => text.clone(),
            })
            .collect();
        out.push_str(&format!("| {} | {} |\n", display_name(&row.protocol), marked.join(" | ")));
    }
    out
}

pub fn render(groups: &[Group]) -> String {
    let seeds: Vec<usize> = groups.iter().flat_map(|g| g.rows.iter().map(|r| r.seeds)).collect();
    let (lo, hi) = (seeds.iter().min().unwrap_or(&0), seeds.iter().max().unwrap_or(&0));
    let seed_text = if lo == hi { format!("{lo}") } else { format!("{lo}–{hi}") };
    let mut out = format!(
        "# Results\n\nMeans over {seed_text} seeds. Best per column in bold, second best underlined; ↓ marks lower-is-better.\n"
    );
    for group in groups {
        out.push('\n');
        out.push_str(&render_group(group));
    }
    out
}

/// Reads the results CSV at `input` and writes the Markdown report to `out`.
pub fn cmd_report(input: &Path, out: &Path) -> Result<String> {
    let rows = read_results(input)?;
    let text = render(&summarize(&rows)?);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    std::fs::write(out, &text).map_err(|e| HarnessError::io(out, e))?;
    Ok(text)
}
