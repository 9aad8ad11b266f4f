//! Consolidated markdown and CSV summary of whatever runs have completed.

use std::fmt::Write as _;
use std::fs;

use serde::de::DeserializeOwned;

use lorakey::attacks::AttackReport;
use lorakey::verify::VerificationReport;

use crate::artifacts::Artifacts;
use crate::commands::{KeySummary, PriorSummary};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Everything found in an artifact directory.
#[derive(Debug, Default)]
pub struct Collected {
    pub prior: Option<PriorSummary>,
    pub key: Option<KeySummary>,
    pub verify: Vec<(String, VerificationReport)>,
    pub attack: Option<AttackReport>,
}

impl Collected {
    pub fn is_empty(&self) -> bool {
        self.prior.is_none() && self.key.is_none() && self.verify.is_empty() && self.attack.is_none()
    }
}

fn read_opt<T: DeserializeOwned>(arts: &Artifacts, rel: &str) -> CliResult<Option<T>> {
    if !arts.exists(rel) {
        return Ok(None);
    }
    let bytes = arts.read(rel, rel, "lorakey report")?;
    serde_json::from_slice(&bytes).map(Some).map_err(|e| CliError::Corrupt {
        path: arts.path(rel),
        source: lorakey::Error::Corrupt(e.to_string()),
    })
}

pub fn collect(arts: &Artifacts) -> CliResult<Collected> {
    let mut verify = Vec::new();
    let dir = arts.path("reports");
    if dir.is_dir() {
        let mut names: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| CliError::io(&dir, e))?
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter(|n| n.starts_with("verify_") && n.ends_with(".json"))
            .collect();
        names.sort();
        for n in names {
            let label = n["verify_".len()..n.len() - ".json".len()].to_string();
            if let Some(r) = read_opt(arts, &format!("reports/{n}"))? {
                verify.push((label, r));
            }
        }
    }
    Ok(Collected {
        prior: read_opt(arts, "prior/summary.json")?,
        key: read_opt(arts, "key/summary.json")?,
        verify,
        attack: read_opt(arts, "reports/attack.json")?,
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

pub fn markdown(arts: &Artifacts, c: &Collected) -> String {
    let mut md = String::from("# Watermark experiment summary\n\n");
    if c.is_empty() {
        md.push_str("No completed runs.\n");
        return md;
    }
    // The report's own run is left out so regenerating it is a fixed point.
    let runs: Vec<_> = arts.manifest().runs.iter().filter(|(_, r)| r.command != "report").collect();
    if !runs.is_empty() {
        md.push_str("| run | command | config sha256 |\n|---|---|---|\n");
        for (name, r) in runs {
            let _ = writeln!(md, "| {name} | {} | `{}` |", r.command, &r.config_hash[..12]);
        }
        md.push('\n');
    }
    if let Some(p) = &c.prior {
        md.push_str("## Latent prior\n\n| clean bit acc (%) | distorted bit acc (%) | residual RMS | base loss |\n|---|---|---|---|\n");
        let _ = writeln!(
            md,
            "| {} | {} | {:.3} | {:.4} |\n",
            pct(p.clean_bit_accuracy),
            pct(p.distorted_bit_accuracy),
            p.residual_rms,
            p.base_final_loss
        );
    }
    if let Some(k) = &c.key {
        md.push_str("## Key adapter\n\n| L_wm | L_sem | mean abs cos(applied update, semantic gradient) |\n|---|---|---|\n");
        let _ = writeln!(md, "| {:.5} | {:.5} | {:.5} |\n", k.final_l_wm, k.final_l_sem, k.mean_abs_cos_applied);
    }
    if !c.verify.is_empty() {
        md.push_str("## Verification\n\n| images | n | L | target FPR | τ | bit acc (%) | TPR | empirical FPR |\n|---|---|---|---|---|---|---|---|\n");
        for (label, r) in &c.verify {
            let _ = writeln!(
                md,
                "| {label} | {} | {} | {:e} | {} | {} | {:.3} | {} |",
                r.entries.len(),
                r.policy.message_len,
                r.policy.target_fpr,
                r.policy.tau,
                pct(r.mean_bit_accuracy),
                r.acceptance_rate,
                r.empirical_fpr.map_or("-".into(), |f| format!("{f:.3}"))
            );
        }
        md.push('\n');
    }
    if let Some(a) = &c.attack {
        let _ = writeln!(
            md,
            "## Robustness\n\n{} images per column, L = {}, τ = {} (target FPR {:e}).\n",
            a.n_images, a.message_len, a.tau, a.target_fpr
        );
        let cols: Vec<_> = a.rows.iter().chain(&a.average).collect();
        let _ = writeln!(md, "| metric | {} |", cols.iter().map(|r| r.name.as_str()).collect::<Vec<_>>().join(" | "));
        let _ = writeln!(md, "|---|{}", "---|".repeat(cols.len()));
        let _ = writeln!(md, "| bit acc (%) | {} |", cols.iter().map(|r| pct(r.bit_accuracy)).collect::<Vec<_>>().join(" | "));
        let _ = writeln!(md, "| TPR | {} |", cols.iter().map(|r| format!("{:.3}", r.tpr)).collect::<Vec<_>>().join(" | "));
        if let Some(ctl) = &a.control {
            let _ = writeln!(md, "\nUnwatermarked control: bit acc {} %, acceptances {:.3}.", pct(ctl.bit_accuracy), ctl.tpr);
        }
        for cv in &a.curves {
            let _ = writeln!(md, "\n### {} curve\n\n| x | bit acc (%) | TPR |\n|---|---|---|", cv.name);
            for p in &cv.points {
                let _ = writeln!(md, "| {} | {} | {:.3} |", p.x, pct(p.bit_accuracy), p.tpr);
            }
        }
    }
    md
}

/// Long-format CSV: `section,name,metric,value`.
pub fn csv(c: &Collected) -> String {
    let mut out = String::from("section,name,metric,value\n");
    let mut row = |s: &str, n: &str, m: &str, v: f64| {
        let _ = writeln!(out, "{s},{n},{m},{v}");
    };
    if let Some(p) = &c.prior {
        row("prior", "prior", "clean_bit_accuracy", p.clean_bit_accuracy);
        row("prior", "prior", "distorted_bit_accuracy", p.distorted_bit_accuracy);
        row("prior", "prior", "residual_rms", p.residual_rms);
    }
    if let Some(k) = &c.key {
        row("key", "key", "l_wm", k.final_l_wm);
        row("key", "key", "l_sem", k.final_l_sem);
        row("key", "key", "mean_abs_cos_applied", k.mean_abs_cos_applied);
    }
    for (label, r) in &c.verify {
        row("verify", label, "bit_accuracy", r.mean_bit_accuracy);
        row("verify", label, "tpr", r.acceptance_rate);
        if let Some(f) = r.empirical_fpr {
            row("verify", label, "empirical_fpr", f);
        }
    }
    if let Some(a) = &c.attack {
        for r in a.rows.iter().chain(&a.average).chain(&a.control) {
            row("attack", &r.name, "bit_accuracy", r.bit_accuracy);
            row("attack", &r.name, "tpr", r.tpr);
        }
        for cv in &a.curves {
            for p in &cv.points {
                row(&cv.name, &p.x.to_string(), "bit_accuracy", p.bit_accuracy);
                row(&cv.name, &p.x.to_string(), "tpr", p.tpr);
            }
        }
    }
    out
}

/// Write `reports/summary.md` and `reports/summary.csv`.
pub fn report_cmd(arts: &mut Artifacts, cfg: &ExperimentConfig) -> CliResult<Collected> {
    let c = collect(arts)?;
    let md = markdown(arts, &c);
    arts.write("reports/summary.md", md.as_bytes())?;
    arts.write("reports/summary.csv", csv(&c).as_bytes())?;
    arts.commit("report", "report", cfg)?;
    Ok(c)
}
