//! Result tables aggregated over run indices.

use std::collections::BTreeMap;
use std::str::FromStr;

use super::store::{RunRecord, Store};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, Aggregate};

/// Which cells a table covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableSelect {
    /// No pre-training, no intermediate phase.
    Baseline,
    /// Pre-trained, no intermediate phase.
    Pretrained,
    /// Pre-trained with the intermediate phase.
    Intermediate,
    All,
}

impl FromStr for TableSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "pretrained" => Ok(Self::Pretrained),
            "intermediate" => Ok(Self::Intermediate),
            "all" => Ok(Self::All),
            _ => Err(Error::Plan(format!(
                "unknown selection `{s}` (baseline, pretrained, intermediate, all)"
            ))),
        }
    }
}

impl TableSelect {
    fn accepts(self, r: &RunRecord) -> bool {
        let k = &r.key;
        match self {
            Self::Baseline => k.pretrain_size == 0 && !k.intermediate,
            Self::Pretrained => k.pretrain_size > 0 && !k.intermediate,
            Self::Intermediate => k.pretrain_size > 0 && k.intermediate,
            Self::All => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub pretrain_size: usize,
    pub intermediate: bool,
    pub finetune_size: usize,
    pub accuracy: Option<Aggregate>,
    pub miou: Option<Aggregate>,
    pub complete: usize,
    pub failed: usize,
    pub expected: usize,
}

impl TableRow {
    pub fn notes(&self) -> Vec<String> {
        let mut notes = Vec::new();
        if self.complete == 1 {
            notes.push("single run".to_string());
        }
        if self.complete < self.expected {
            notes.push(format!("incomplete {}/{}", self.complete, self.expected));
        }
        if self.failed > 0 {
            notes.push(format!("{} failed", self.failed));
        }
        notes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub select: TableSelect,
    pub rows: Vec<TableRow>,
}

/// `45000` → `45k`; sizes that are not whole thousands stay as they are.
pub fn size_label(n: usize) -> String {
    if n >= 1000 && n.is_multiple_of(1000) {
        format!("{}k", n / 1000)
    } else {
        n.to_string()
    }
}

fn cell(a: &Option<Aggregate>) -> String {
    match a {
        Some(a) => format!("{}%", a.format()),
        None => "n/a".into(),
    }
}

pub fn build_table(records: &[RunRecord], select: TableSelect) -> Result<Table> {
    let mut groups: BTreeMap<(usize, bool, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| select.accepts(r)) {
        groups
            .entry((r.key.pretrain_size, r.key.intermediate, r.key.finetune_size))
            .or_default()
            .push(r);
    }
    if groups.is_empty() {
        return Err(Error::Empty("no records".into()));
    }
    let mut rows = Vec::new();
    for ((pretrain_size, intermediate, finetune_size), recs) in groups {
        let done: Vec<_> = recs
            .iter()
            .filter_map(|r| r.metrics.as_ref().filter(|_| r.is_complete()))
            .collect();
        let agg = |f: fn(&super::store::RecordMetrics) -> f64| {
            let vals: Vec<f64> = done.iter().map(|m| f(m)).collect();
            aggregate(&vals).ok()
        };
        rows.push(TableRow {
            pretrain_size,
            intermediate,
            finetune_size,
            accuracy: agg(|m| m.accuracy),
            miou: agg(|m| m.miou),
            complete: done.len(),
            failed: recs.iter().filter(|r| !r.is_complete()).count(),
            expected: recs.iter().map(|r| r.runs_expected).max().unwrap_or(0),
        });
    }
    Ok(Table { select, rows })
}

impl Table {
    fn mixed_intermediate(&self) -> bool {
        self.rows.iter().any(|r| r.intermediate) && self.rows.iter().any(|r| !r.intermediate)
    }

    fn has_notes(&self) -> bool {
        self.rows.iter().any(|r| !r.notes().is_empty())
    }

    /// Pipe table; the pre-train column is dropped for the baseline layout
    /// and the size is printed only on the first row of its group.
    pub fn to_markdown(&self) -> String {
        let baseline = self.rows.iter().all(|r| r.pretrain_size == 0 && !r.intermediate);
        let mixed = self.mixed_intermediate();
        let notes = self.has_notes();
        let mut head = Vec::new();
        if !baseline {
            head.push("# Pre-train");
        }
        if mixed {
            head.push("Intermediate");
        }
        head.extend(["# Fine-tune", "Accuracy", "mIoU"]);
        if notes {
            head.push("Notes");
        }
        let mut out = format!("| {} |\n|{}\n", head.join(" | "), "---|".repeat(head.len()));
        let mut last_group = None;
        for r in &self.rows {
            let mut cols = Vec::new();
            if !baseline {
                let group = (r.pretrain_size, r.intermediate);
                cols.push(if last_group == Some(group) {
                    String::new()
                } else {
                    size_label(r.pretrain_size)
                });
                last_group = Some(group);
            }
            if mixed {
                cols.push(if r.intermediate { "yes" } else { "no" }.into());
            }
            cols.extend([r.finetune_size.to_string(), cell(&r.accuracy), cell(&r.miou)]);
            if notes {
                cols.push(r.notes().join("; "));
            }
            out.push_str(&format!("| {} |\n", cols.join(" | ")));
        }
        out
    }

    pub const CSV_HEADER: &'static str = "pretrain_size,intermediate,finetune_size,runs,expected_runs,failed_runs,\
accuracy_mean,accuracy_stderr,accuracy_std,miou_mean,miou_stderr,miou_std,accuracy,miou,single_run";

    /// One row per cell; numbers use two decimals like the rendered table.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        let num = |a: &Option<Aggregate>, f: fn(&Aggregate) -> f64| {
            a.as_ref().map(|a| format!("{:.2}", f(a))).unwrap_or_default()
        };
        for r in &self.rows {
            let fields = [
                r.pretrain_size.to_string(),
                r.intermediate.to_string(),
                r.finetune_size.to_string(),
                r.complete.to_string(),
                r.expected.to_string(),
                r.failed.to_string(),
                num(&r.accuracy, |a| a.mean),
                num(&r.accuracy, |a| a.stderr),
                num(&r.accuracy, |a| a.std),
                num(&r.miou, |a| a.mean),
                num(&r.miou, |a| a.stderr),
                num(&r.miou, |a| a.std),
                r.accuracy.as_ref().map(Aggregate::format).unwrap_or_default(),
                r.miou.as_ref().map(Aggregate::format).unwrap_or_default(),
                (r.complete == 1).to_string(),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

/// Markdown and CSV renderings of the selected cells of `store`.
pub fn emit_table(store: &Store, select: TableSelect) -> Result<(String, String)> {
    let table = build_table(&store.records()?, select)?;
    Ok((table.to_markdown(), table.to_csv()))
}
