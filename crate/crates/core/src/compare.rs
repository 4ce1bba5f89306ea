//! Rule-versus-combination comparison tables.
//!
//! A table has one column per fusion rule and one row per model combination;
//! each cell is the dataset-pooled mean IoU of fusing that combination with
//! that rule. Single-model rows reproduce the base model's own score in every
//! column, since every rule reduces to argmax for one model.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionRule};
use crate::io::{read_mask, read_probmap, Manifest};
use crate::metrics::{format_percent, ConfusionMatrix};
use crate::probmap::{stack_models, ModelStack};

pub const POOLING: &str = "dataset-pooled confusion matrix";

/// A set of models fused together, labelled like `U+S+P`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Combo {
    pub label: String,
    pub models: Vec<String>,
}

impl Combo {
    pub fn new(models: Vec<String>) -> Self {
        Self {
            label: models.join("+"),
            models,
        }
    }
}

/// Parses `all` or a comma-separated list of rule ids.
pub fn parse_rules(spec: &str) -> Result<Vec<FusionRule>> {
    if spec.trim() == "all" {
        return Ok(FusionRule::COMPARISON.to_vec());
    }
    let mut rules = Vec::new();
    for id in spec.split(',').map(str::trim) {
        let rule: FusionRule = id.parse()?;
        if rules.contains(&rule) {
            return Err(Error::Duplicate {
                kind: "rule",
                name: id.to_string(),
            });
        }
        rules.push(rule);
    }
    Ok(rules)
}

/// Every single model in manifest order, then every multi-model subset from
/// largest to smallest, each size in lexicographic manifest order.
pub fn all_combos(models: &[String]) -> Vec<Combo> {
    let n = models.len();
    let mut subsets: Vec<Vec<usize>> = (1u64..(1 << n))
        .map(|bits| (0..n).filter(|i| bits & (1 << i) != 0).collect())
        .collect();
    subsets.sort_by(|a, b| {
        let rank = |s: &Vec<usize>| if s.len() == 1 { 0 } else { 1 };
        rank(a)
            .cmp(&rank(b))
            .then(b.len().cmp(&a.len()))
            .then(a.cmp(b))
    });
    subsets
        .into_iter()
        .map(|s| Combo::new(s.into_iter().map(|i| models[i].clone()).collect()))
        .collect()
}

/// Parses `all` or a comma-separated list of `+`-joined model names.
pub fn parse_combos(spec: &str, manifest: &Manifest) -> Result<Vec<Combo>> {
    let names: Vec<String> = manifest.model_names().map(String::from).collect();
    if spec.trim() == "all" {
        return Ok(all_combos(&names));
    }
    let mut combos: Vec<Combo> = Vec::new();
    for item in spec.split(',').map(str::trim) {
        let models: Vec<String> = item.split('+').map(|m| m.trim().to_string()).collect();
        for (i, m) in models.iter().enumerate() {
            manifest.model(m)?;
            if models[..i].contains(m) {
                return Err(Error::invalid(format!(
                    "combo '{item}' repeats model '{m}'"
                )));
            }
        }
        if combos.iter().any(|c| c.label == item) {
            return Err(Error::Duplicate {
                kind: "combo",
                name: item.to_string(),
            });
        }
        combos.push(Combo {
            label: item.to_string(),
            models,
        });
    }
    Ok(combos)
}

/// Loads the named models' maps for one image, in manifest order.
pub fn load_stack(manifest: &Manifest, models: &[String], image_id: &str) -> Result<ModelStack> {
    for m in models {
        manifest.model(m)?;
    }
    let mut maps = Vec::with_capacity(models.len());
    for entry in &manifest.models {
        if models.contains(&entry.name) {
            let map = read_probmap(manifest.probmap_path(entry, image_id))?;
            maps.push((entry.name.clone(), map));
        }
    }
    stack_models(maps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableRow {
    pub combo: String,
    pub models: Vec<String>,
    /// Mean IoU as a fraction, one entry per rule column.
    pub mean_iou: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonTable {
    pub pooling: String,
    pub rules: Vec<FusionRule>,
    pub rows: Vec<TableRow>,
}

impl ComparisonTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let table: ComparisonTable = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("comparison table: {e}")))?;
        for row in &table.rows {
            if row.mean_iou.len() != table.rules.len() {
                return Err(Error::invalid(format!(
                    "row '{}' has {} cells for {} rules",
                    row.combo,
                    row.mean_iou.len(),
                    table.rules.len()
                )));
            }
        }
        Ok(table)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("table serializes");
        out.push('\n');
        out
    }

    pub fn row(&self, combo: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.combo == combo)
    }

    pub fn cell(&self, combo: &str, rule: FusionRule) -> Option<f64> {
        let col = self.rules.iter().position(|&r| r == rule)?;
        self.row(combo).map(|r| r.mean_iou[col])
    }

    /// Markdown table in percent with two decimals; the largest value of each
    /// row is bolded (every cell that ties for it, after rounding).
    pub fn to_markdown(&self) -> String {
        let mut out = format!("Mean IoU (%), {}.\n\n| Model |", self.pooling);
        for rule in &self.rules {
            let _ = write!(out, " {} |", rule.title());
        }
        out.push_str("\n|---|");
        for _ in &self.rules {
            out.push_str("---:|");
        }
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.mean_iou.iter().map(|&v| format_percent(v)).collect();
            let best = row
                .mean_iou
                .iter()
                .map(|&v| (v * 10_000.0).round_ties_even() as i64)
                .max();
            let _ = write!(out, "| {} |", row.combo);
            for (cell, &v) in cells.iter().zip(&row.mean_iou) {
                if Some((v * 10_000.0).round_ties_even() as i64) == best {
                    let _ = write!(out, " **{cell}** |");
                } else {
                    let _ = write!(out, " {cell} |");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Fuses every combination with every rule over the manifest's images and
/// scores each cell with a pooled confusion matrix.
pub fn evaluate(
    manifest: &Manifest,
    rules: &[FusionRule],
    combos: &[Combo],
) -> Result<ComparisonTable> {
    if rules.is_empty() || combos.is_empty() {
        return Err(Error::invalid("need at least one rule and one combination"));
    }
    let c = manifest.num_classes();
    let all_models: Vec<String> = manifest
        .model_names()
        .filter(|name| {
            combos
                .iter()
                .any(|combo| combo.models.iter().any(|m| m == name))
        })
        .map(String::from)
        .collect();

    let per_image: Vec<Vec<ConfusionMatrix>> = manifest
        .images
        .par_iter()
        .map(|id| {
            let gt = read_mask(manifest.ground_truth_path(id), c)?;
            let stack = load_stack(manifest, &all_models, id)?;
            let mut cells = Vec::with_capacity(combos.len() * rules.len());
            for combo in combos {
                let subset = select(&stack, &combo.models)?;
                for &rule in rules {
                    let pred = fuse(rule, &subset);
                    let mut cm = ConfusionMatrix::new(c);
                    cm.accumulate(id, &pred, &gt)?;
                    cells.push(cm);
                }
            }
            Ok(cells)
        })
        .collect::<Result<_>>()?;

    let mut pooled = vec![ConfusionMatrix::new(c); combos.len() * rules.len()];
    for cells in &per_image {
        for (acc, cm) in pooled.iter_mut().zip(cells) {
            acc.merge(cm)?;
        }
    }
    let rows = combos
        .iter()
        .enumerate()
        .map(|(i, combo)| {
            let mean_iou = pooled[i * rules.len()..(i + 1) * rules.len()]
                .iter()
                .map(ConfusionMatrix::mean_iou)
                .collect::<Result<_>>()?;
            Ok(TableRow {
                combo: combo.label.clone(),
                models: combo.models.clone(),
                mean_iou,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ComparisonTable {
        pooling: POOLING.to_string(),
        rules: rules.to_vec(),
        rows,
    })
}

/// Sub-stack of `models`, keeping the stack's (manifest) order.
fn select(stack: &ModelStack, models: &[String]) -> Result<ModelStack> {
    let maps = stack
        .models()
        .iter()
        .filter(|(name, _)| models.contains(name))
        .cloned()
        .collect();
    stack_models(maps)
}
