//! CSV input/output for datasets, chain traces, estimation traces, and
//! diagnostic summaries, plus a JSON manifest writer.
//!
//! Floating-point fields are written with the shortest round-trip decimal
//! representation, so a written file re-read yields bitwise-equal numbers.

use std::path::Path;

use serde::Serialize;

use crate::diagnostics::ChainSummary;
use crate::error::{Error, Result};
use crate::model::{IndividualData, Observations};
use crate::saem::SaemTrace;
use crate::samplers::ChainTrace;
use crate::transform::Transform;

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn parse_field(field: &str, line: u64, column: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        Error::Invalid(format!("line {line}: column {column} is not a number: {field:?}"))
    })
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Write continuous observations as `id,time,value,dose[,cov1..covq]`, one
/// row per observation, covariates repeated per individual.
pub fn write_continuous_csv(path: impl AsRef<Path>, data: &[IndividualData]) -> Result<()> {
    let q = data
        .first()
        .and_then(|d| d.covariates.as_ref())
        .map_or(0, |c| c.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["id", "time", "value", "dose"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for j in 1..=q {
        header.push(format!("cov{j}"));
    }
    w.write_record(&header)?;
    for ind in data {
        let Observations::Continuous { times, values } = &ind.observations else {
            return Err(Error::Invalid(format!(
                "individual {} does not hold continuous observations",
                ind.id
            )));
        };
        let covs = match &ind.covariates {
            Some(c) if c.len() == q => c.iter().copied().collect::<Vec<_>>(),
            None if q == 0 => Vec::new(),
            _ => {
                return Err(Error::Invalid(format!(
                    "individual {} has a different covariate count than the first",
                    ind.id
                )))
            }
        };
        for (t, y) in times.iter().zip(values) {
            let mut row = vec![ind.id.clone(), fmt(*t), fmt(*y), fmt(ind.dose)];
            row.extend(covs.iter().map(|&c| fmt(c)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a continuous dataset written by [`write_continuous_csv`]; any
/// columns after `dose` are taken as per-individual covariates.
pub fn read_continuous_csv(path: impl AsRef<Path>) -> Result<Vec<IndividualData>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let expected = ["id", "time", "value", "dose"];
    if headers.len() < 4 || headers.iter().take(4).ne(expected) {
        return Err(Error::Invalid(format!(
            "continuous dataset must start with columns {expected:?}, got {headers:?}"
        )));
    }
    let q = headers.len() - 4;
    struct Partial {
        times: Vec<f64>,
        values: Vec<f64>,
        dose: f64,
        covs: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_id: std::collections::HashMap<String, Partial> = std::collections::HashMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k as u64 + 2;
        if rec.len() != headers.len() {
            return Err(Error::Invalid(format!(
                "line {line}: expected {} fields, got {}",
                headers.len(),
                rec.len()
            )));
        }
        let id = rec[0].trim().to_string();
        let time = parse_field(&rec[1], line, "time")?;
        let value = parse_field(&rec[2], line, "value")?;
        let dose = parse_field(&rec[3], line, "dose")?;
        let mut covs = Vec::with_capacity(q);
        for j in 0..q {
            covs.push(parse_field(&rec[4 + j], line, &headers[4 + j])?);
        }
        let entry = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Partial {
                times: Vec::new(),
                values: Vec::new(),
                dose,
                covs: covs.clone(),
            }
        });
        if entry.dose != dose {
            return Err(Error::Invalid(format!(
                "line {line}: dose changes within individual {id}"
            )));
        }
        if entry.covs != covs {
            return Err(Error::Invalid(format!(
                "line {line}: covariates change within individual {id}"
            )));
        }
        entry.times.push(time);
        entry.values.push(value);
    }
    order
        .into_iter()
        .map(|id| {
            let p = by_id.remove(&id).expect("present by construction");
            let ind = IndividualData::continuous(id, p.times, p.values, p.dose)?;
            Ok(if q > 0 { ind.with_covariates(p.covs) } else { ind })
        })
        .collect()
}

/// Write repeated time-to-event records as `id,time,event`: one `event=1`
/// row per event, and for censored follow-up a final `event=0` row at the
/// censoring time.
pub fn write_tte_csv(path: impl AsRef<Path>, data: &[IndividualData]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "time", "event"])?;
    for ind in data {
        let Observations::TimeToEvent {
            event_times,
            censored,
            censor_time,
        } = &ind.observations
        else {
            return Err(Error::Invalid(format!(
                "individual {} does not hold event observations",
                ind.id
            )));
        };
        for t in event_times {
            w.write_record([ind.id.as_str(), &fmt(*t), "1"])?;
        }
        if *censored {
            w.write_record([ind.id.as_str(), &fmt(*censor_time), "0"])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a time-to-event dataset written by [`write_tte_csv`]. A record
/// without an `event=0` row is treated as ending at its last event.
pub fn read_tte_csv(path: impl AsRef<Path>) -> Result<Vec<IndividualData>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let expected = ["id", "time", "event"];
    if headers.len() != 3 || headers.iter().ne(expected) {
        return Err(Error::Invalid(format!(
            "event dataset must have columns {expected:?}, got {headers:?}"
        )));
    }
    struct Partial {
        events: Vec<f64>,
        censor: Option<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_id: std::collections::HashMap<String, Partial> = std::collections::HashMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k as u64 + 2;
        let id = rec[0].trim().to_string();
        let time = parse_field(&rec[1], line, "time")?;
        let event = parse_field(&rec[2], line, "event")?;
        let entry = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Partial {
                events: Vec::new(),
                censor: None,
            }
        });
        if entry.censor.is_some() {
            return Err(Error::Invalid(format!(
                "line {line}: row after censoring row for individual {id}"
            )));
        }
        match event as i64 {
            1 => entry.events.push(time),
            0 => entry.censor = Some(time),
            _ => {
                return Err(Error::Invalid(format!(
                    "line {line}: event flag must be 0 or 1, got {event}"
                )))
            }
        }
    }
    order
        .into_iter()
        .map(|id| {
            let p = by_id.remove(&id).expect("present by construction");
            match p.censor {
                Some(tc) => IndividualData::time_to_event(id, p.events, true, tc),
                None => {
                    let last = *p.events.last().ok_or_else(|| {
                        Error::Invalid(format!("individual {id} has no rows"))
                    })?;
                    IndividualData::time_to_event(id, p.events, false, last)
                }
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Traces and diagnostics
// ---------------------------------------------------------------------------

/// Write a sampling trace as
/// `iter,accepted,log_target,phi_<name>..,psi_<name>..` with the natural
/// parameters recovered through the coordinate transforms.
pub fn write_chain_csv(
    path: impl AsRef<Path>,
    trace: &ChainTrace,
    names: &[String],
    transforms: &[Transform],
) -> Result<()> {
    let p = trace.dim();
    if names.len() != p || transforms.len() != p {
        return Err(Error::Invalid(format!(
            "expected {p} names and transforms, got {} and {}",
            names.len(),
            transforms.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iter".to_string(), "accepted".into(), "log_target".into()];
    header.extend(names.iter().map(|n| format!("phi_{n}")));
    header.extend(names.iter().map(|n| format!("psi_{n}")));
    w.write_record(&header)?;
    for k in 0..trace.len() {
        let phi = &trace.samples[k];
        let mut row = vec![
            (k + 1).to_string(),
            if trace.accepted[k] { "1" } else { "0" }.to_string(),
            fmt(trace.log_target[k]),
        ];
        row.extend(phi.iter().map(|&x| fmt(x)));
        row.extend(
            transforms
                .iter()
                .zip(phi.iter())
                .map(|(t, &x)| fmt(t.backward(x))),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Write an estimation trace as `iter,gamma,kernel,<component names>`.
pub fn write_saem_csv(path: impl AsRef<Path>, trace: &SaemTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iter".to_string(), "gamma".into(), "kernel".into()];
    header.extend(trace.names.iter().cloned());
    w.write_record(&header)?;
    for it in &trace.iterations {
        let mut row = vec![it.iter.to_string(), fmt(it.gamma), it.kernel.to_string()];
        row.extend(it.theta.iter().map(|&x| fmt(x)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Write per-coordinate chain diagnostics as
/// `coordinate,msjd,ess,acceptance_rate`.
pub fn write_summary_csv(
    path: impl AsRef<Path>,
    summary: &ChainSummary,
    names: &[String],
) -> Result<()> {
    if names.len() != summary.msjd.len() {
        return Err(Error::Invalid(format!(
            "expected {} coordinate names, got {}",
            summary.msjd.len(),
            names.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["coordinate", "msjd", "ess", "acceptance_rate"])?;
    for (j, name) in names.iter().enumerate() {
        w.write_record([
            name.as_str(),
            &fmt(summary.msjd[j]),
            &fmt(summary.ess[j]),
            &fmt(summary.acceptance_rate),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write autocorrelations as `lag,coordinate,value`, lag-major.
pub fn write_acf_csv(
    path: impl AsRef<Path>,
    acf: &[Vec<f64>],
    names: &[String],
) -> Result<()> {
    if names.len() != acf.len() {
        return Err(Error::Invalid(format!(
            "expected {} coordinate names, got {}",
            acf.len(),
            names.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lag", "coordinate", "value"])?;
    let max_lag = acf.iter().map(|a| a.len()).max().unwrap_or(0);
    for lag in 0..max_lag {
        for (j, name) in names.iter().enumerate() {
            if let Some(&v) = acf[j].get(lag) {
                w.write_record([&lag.to_string(), name.as_str(), &fmt(v)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Write mean-square-distance curves as `iter,component,value`.
pub fn write_distance_csv(
    path: impl AsRef<Path>,
    curves: &[(String, Vec<f64>)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "component", "value"])?;
    for (name, curve) in curves {
        for (k, &v) in curve.iter().enumerate() {
            w.write_record([&(k + 1).to_string(), name.as_str(), &fmt(v)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write a pretty-printed JSON manifest.
pub fn write_manifest(path: impl AsRef<Path>, manifest: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}
