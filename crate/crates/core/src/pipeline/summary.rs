//! The report stage: pooled attacked/unattacked tables and plot-ready CSVs.

use std::fmt::Write as _;

use super::config::{RunConfig, Stage};
use super::stages::{AblationDoc, EvalDoc, Split};
use super::store::{atomic_write, read_json, Layout};
use crate::attack::AttackMode;
use crate::error::{Error, Result};
use crate::eval::{MetricsReport, Reference};

pub const REPORT_CSV_HEADER: &str = "mode,reference,split,metric,attacked,unattacked,delta";

/// One metric with its attacked (✓) and unattacked (✗) value.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub split: Split,
    pub metric: &'static str,
    pub attacked: f64,
    pub unattacked: f64,
}

impl DeltaRow {
    pub fn delta(&self) -> f64 {
        self.attacked - self.unattacked
    }
}

/// Episodes of every instance pooled into one report.
pub fn pooled(doc: &EvalDoc, split: Split, attacked: bool, reference: Reference) -> MetricsReport {
    let rows = doc
        .instances
        .iter()
        .filter_map(|i| i.get(split, attacked, reference))
        .flat_map(|r| r.rows.iter().cloned())
        .collect();
    MetricsReport::from_rows(reference, rows)
}

fn delta_rows(doc: &EvalDoc, reference: Reference) -> Vec<DeltaRow> {
    let mut out = Vec::new();
    for split in Split::ALL {
        let a = pooled(doc, split, true, reference);
        let u = pooled(doc, split, false, reference);
        for (metric, x, y) in [
            ("sr", a.sr_pct, u.sr_pct),
            ("osr", a.osr_pct, u.osr_pct),
            ("ndtw", a.ndtw_pct, u.ndtw_pct),
            ("stop_rate", a.stop_rate_pct, u.stop_rate_pct),
        ] {
            out.push(DeltaRow {
                split,
                metric,
                attacked: x,
                unattacked: y,
            });
        }
    }
    out
}

fn reference_name(r: Reference) -> &'static str {
    match r {
        Reference::Attack => "attack",
        Reference::Original => "original",
    }
}

fn markdown_table(md: &mut String, title: &str, rows: &[DeltaRow]) {
    let _ = writeln!(md, "## {title}\n");
    let _ = writeln!(
        md,
        "| split | SR ✓ | SR ✗ | SR Δ | OSR ✓ | OSR ✗ | OSR Δ | nDTW ✓ | nDTW ✗ | nDTW Δ | stop ✓ | stop ✗ | stop Δ |"
    );
    let _ = writeln!(md, "|---|{}", "---:|".repeat(12));
    for split in Split::ALL {
        let _ = write!(md, "| {} |", split.name());
        for r in rows.iter().filter(|r| r.split == split) {
            let _ = write!(md, " {:.2} | {:.2} | {:+.2} |", r.attacked, r.unattacked, r.delta());
        }
        md.push('\n');
    }
    md.push('\n');
}

/// Aggregates every available evaluation (and the ablation sweep, when
/// present) into `report.md`, `report.csv` and per-instance CSVs.
pub fn report(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.run.out_dir);
    let mut md = String::from("# Attack report\n\n");
    let mut csv = format!("{REPORT_CSV_HEADER}\n");
    let mut found = 0;
    for mode in [AttackMode::Stop, AttackMode::Trajectory] {
        let mut mcfg = cfg.clone();
        mcfg.attack.mode = mode;
        let doc: EvalDoc = match read_json(&layout.evaluation(mode), &mcfg.stage_hash(Stage::Attack)) {
            Ok(d) => d,
            Err(Error::MissingArtifact(_)) => continue,
            Err(e) => return Err(e),
        };
        found += 1;
        let refs: &[Reference] = match mode {
            AttackMode::Stop => &[Reference::Attack],
            AttackMode::Trajectory => &[Reference::Attack, Reference::Original],
        };
        for &reference in refs {
            let rows = delta_rows(&doc, reference);
            let title = format!(
                "{mode} attack, {} instances, reference: {}",
                doc.instances.len(),
                reference_name(reference)
            );
            markdown_table(&mut md, &title, &rows);
            for r in &rows {
                let _ = writeln!(
                    csv,
                    "{mode},{},{},{},{:.6},{:.6},{:.6}",
                    reference_name(reference),
                    r.split.name(),
                    r.metric,
                    r.attacked,
                    r.unattacked,
                    r.delta()
                );
            }
        }
        let mut per = String::from(
            "instance_id,category,split,reference,attacked,episodes,sr_pct,osr_pct,ndtw_pct,stop_rate_pct\n",
        );
        for inst in &doc.instances {
            for c in &inst.conditions {
                let r = &c.report;
                let _ = writeln!(
                    per,
                    "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                    inst.instance_id,
                    inst.category.name(),
                    c.split.name(),
                    reference_name(r.reference),
                    c.attacked as u8,
                    r.rows.len(),
                    r.sr_pct,
                    r.osr_pct,
                    r.ndtw_pct,
                    r.stop_rate_pct
                );
            }
        }
        atomic_write(&layout.per_instance(mode), per.as_bytes())?;
    }
    if found == 0 {
        return Err(Error::MissingArtifact(format!(
            "no evaluation found in {}; run eval first",
            layout.root.display()
        )));
    }
    match read_json::<AblationDoc>(&layout.ablation(), &cfg.stage_hash(Stage::Ablation)) {
        Ok(doc) => ablation_table(&mut md, &doc),
        Err(Error::MissingArtifact(_)) => {}
        Err(e) => return Err(e),
    }
    atomic_write(&layout.report_md(), md.as_bytes())?;
    atomic_write(&layout.report_csv(), csv.as_bytes())
}

fn ablation_table(md: &mut String, doc: &AblationDoc) {
    let _ = writeln!(md, "## Ablations ({} attack, train split, reference: attack)\n", doc.mode);
    let _ = writeln!(md, "| variable | value | instances | nDTW ✓ | nDTW ✗ | nDTW Δ | SR ✓ | SR ✗ | SR Δ |");
    let _ = writeln!(md, "|---|---:|---:|---:|---:|---:|---:|---:|---:|");
    let mut groups: Vec<(&str, f64)> = Vec::new();
    for r in &doc.rows {
        if !groups.iter().any(|&(v, x)| v == r.variable && x == r.value) {
            groups.push((&r.variable, r.value));
        }
    }
    for (variable, value) in groups {
        let rows: Vec<_> = doc.rows.iter().filter(|r| r.variable == variable && r.value == value).collect();
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&super::stages::AblationRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        let (a, u) = (100.0 * mean(&|r| r.attacked_ndtw), 100.0 * mean(&|r| r.clean_ndtw));
        let (sa, su) = (mean(&|r| r.attacked_sr_pct), mean(&|r| r.clean_sr_pct));
        let _ = writeln!(
            md,
            "| {variable} | {value} | {} | {a:.2} | {u:.2} | {:+.2} | {sa:.2} | {su:.2} | {:+.2} |",
            rows.len(),
            a - u,
            sa - su
        );
    }
    md.push('\n');
}
