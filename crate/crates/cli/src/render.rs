use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::ops::{FitDocument, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

/// Pretty JSON with a trailing newline; the byte layout is stable.
pub fn json<T: Serialize>(value: &T) -> AppResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| AppError::Internal(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn table(header: &[&str], rows: Vec<Vec<String>>) -> AppResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| AppError::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| AppError::Internal(e.to_string()))
}

fn fit_rows(fit: &FitDocument) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    let mut push = |name: String, value: String| rows.push(vec![name, value, String::new(), String::new(), String::new()]);
    push("fit_id".into(), fit.fit_id.clone());
    if let Some(env) = &fit.envelope {
        let cp = env.changepoints;
        for (name, tau) in [("attack", cp.attack), ("sustain", cp.sustain), ("decay", cp.decay), ("release", cp.release)] {
            push(format!("tau[{name}]"), tau.to_string());
        }
        push("node[attack]".into(), env.nodes.attack.to_string());
        push("node[sustain]".into(), env.nodes.sustain.to_string());
        push("node[decay]".into(), env.nodes.decay.to_string());
        if let Some(w) = env.dispersion {
            push("dispersion".into(), w.to_string());
        }
    }
    if let Some(p) = &fit.posterior {
        for d in &p.diagnostics {
            rows.push(vec![
                d.name.clone(),
                d.mean.to_string(),
                d.sd.to_string(),
                d.rhat.to_string(),
                d.ess.to_string(),
            ]);
        }
    }
    rows
}

/// CSV view of an outcome: one table per kind.
pub fn outcome_csv(outcome: &Outcome) -> AppResult<String> {
    match outcome {
        Outcome::Ingested(s) => {
            let mut rows: Vec<Vec<String>> = s
                .songs
                .iter()
                .map(|id| vec!["song".into(), id.clone(), String::new()])
                .collect();
            rows.extend(s.rejects.iter().map(|r| vec!["reject".into(), r.line.to_string(), r.reason.clone()]));
            rows.extend(s.warnings.iter().map(|w| vec!["warning".into(), String::new(), w.clone()]));
            table(&["kind", "item", "detail"], rows)
        }
        Outcome::Fitted(f) => table(&["name", "value", "sd", "rhat", "ess"], fit_rows(f)),
        Outcome::Classified(c) => {
            let rows = c
                .songs
                .iter()
                .zip(&c.clustering.assignments)
                .map(|(s, k)| vec![s.clone(), k.to_string()])
                .collect();
            table(&["song_id", "cluster"], rows)
        }
        Outcome::Planned(p) => {
            let mut rows = Vec::new();
            for (t, week) in p.plan.spend.iter().enumerate() {
                for (j, segment) in week.iter().enumerate() {
                    for (c, x) in segment.iter().enumerate() {
                        rows.push(vec![
                            t.to_string(),
                            j.to_string(),
                            c.to_string(),
                            x.to_string(),
                            p.plan.predicted[t][j].to_string(),
                        ]);
                    }
                }
            }
            table(&["week", "segment", "channel", "spend", "predicted"], rows)
        }
    }
}

pub fn outcome(outcome: &Outcome, format: OutputFormat) -> AppResult<String> {
    match format {
        OutputFormat::Json => json(outcome),
        OutputFormat::Csv => outcome_csv(outcome),
    }
}
