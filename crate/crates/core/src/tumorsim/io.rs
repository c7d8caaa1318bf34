use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    diameter_from_volume, mean_recent_diameter, one_hot, treatment_parts, Counterfactual,
    CounterfactualSet, Dataset, PatientResponse, SimConfig, SimPatient, Split,
};
use crate::error::{Error, Result};

pub const FACTUAL_FILE: &str = "factual.csv";
pub const COUNTERFACTUAL_FILE: &str = "counterfactual.csv";
const FORMAT: &str = "ct-dataset v1";

#[derive(Serialize, Deserialize)]
struct FactualRow {
    split: Split,
    patient: usize,
    t: usize,
    mixture: u8,
    diameter: f64,
    diameter_mean: f64,
    a_none: u8,
    a_chemo: u8,
    a_radio: u8,
    a_both: u8,
    volume: f64,
    concentration: f64,
    probability: f64,
    rho: f64,
    k: f64,
    beta_c: f64,
    alpha_r: f64,
    beta_r: f64,
}

#[derive(Serialize, Deserialize)]
struct CfRow {
    patient: usize,
    origin: usize,
    kind: String,
    intervention: usize,
    step: usize,
    treatment: usize,
    volume: f64,
}

fn write_manifest(w: &mut impl Write, cfg: &SimConfig, table: &str) -> Result<()> {
    writeln!(w, "# format: {FORMAT}")?;
    writeln!(w, "# table: {table}")?;
    writeln!(w, "# seed: {}", cfg.seed)?;
    writeln!(w, "# config: {}", serde_json::to_string(cfg)?)?;
    Ok(())
}

fn read_manifest(path: &Path) -> Result<SimConfig> {
    let reader = BufReader::new(File::open(path)?);
    let mut format = None;
    let mut config = None;
    for line in reader.lines() {
        let line = line?;
        let Some(rest) = line.strip_prefix("# ") else {
            break;
        };
        if let Some(v) = rest.strip_prefix("format: ") {
            format = Some(v.to_string());
        } else if let Some(v) = rest.strip_prefix("config: ") {
            config = Some(serde_json::from_str::<SimConfig>(v)?);
        }
    }
    if format.as_deref() != Some(FORMAT) {
        return Err(Error::Parse(format!(
            "{}: missing or unknown format line",
            path.display()
        )));
    }
    config.ok_or_else(|| Error::Parse(format!("{}: manifest has no config line", path.display())))
}

/// Writes the factual and counterfactual tables into `dir`.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let cfg = &data.config;

    let mut f = BufWriter::new(File::create(dir.join(FACTUAL_FILE))?);
    write_manifest(&mut f, cfg, "factual")?;
    let mut w = csv::Writer::from_writer(f);
    for split in [Split::Train, Split::Val, Split::Test] {
        for p in data.split(split) {
            for t in 0..p.len() {
                let a = one_hot(p.treatment(t));
                let r = &p.response;
                w.serialize(FactualRow {
                    split,
                    patient: p.id,
                    t,
                    mixture: r.mixture_id,
                    diameter: diameter_from_volume(p.volumes[t]),
                    diameter_mean: mean_recent_diameter(&p.volumes[..=t], cfg.window),
                    a_none: a[0] as u8,
                    a_chemo: a[1] as u8,
                    a_radio: a[2] as u8,
                    a_both: a[3] as u8,
                    volume: p.volumes[t],
                    concentration: p.concentration[t],
                    probability: p.probability[t],
                    rho: r.rho,
                    k: r.k,
                    beta_c: r.beta_c,
                    alpha_r: r.alpha_r,
                    beta_r: r.beta_r,
                })?;
            }
        }
    }
    w.flush()?;

    let mut f = BufWriter::new(File::create(dir.join(COUNTERFACTUAL_FILE))?);
    write_manifest(&mut f, cfg, "counterfactual")?;
    let mut w = csv::Writer::from_writer(f);
    for (kind, list) in [
        ("one-step", &data.test_cf.one_step),
        ("multi-step", &data.test_cf.multi_step),
    ] {
        let mut idx = 0usize;
        let mut last = None;
        for cf in list.iter() {
            let key = (cf.patient, cf.origin);
            if last != Some(key) {
                idx = 0;
                last = Some(key);
            }
            for (step, (&treatment, &volume)) in
                cf.intervention.iter().zip(&cf.outcomes).enumerate()
            {
                w.serialize(CfRow {
                    patient: cf.patient,
                    origin: cf.origin,
                    kind: kind.to_string(),
                    intervention: idx,
                    step,
                    treatment,
                    volume,
                })?;
            }
            idx += 1;
        }
    }
    w.flush()?;
    Ok(())
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?)
}

/// Reads a dataset written by [`save_dataset`]. Per-patient noise is not
/// stored, so loaded patients cannot be replayed.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let fpath = dir.join(FACTUAL_FILE);
    let config = read_manifest(&fpath)?;
    let cpath = dir.join(COUNTERFACTUAL_FILE);
    if read_manifest(&cpath)? != config {
        return Err(Error::Parse(
            "factual and counterfactual manifests disagree".into(),
        ));
    }

    let mut splits: BTreeMap<(u8, usize), SimPatient> = BTreeMap::new();
    for row in reader(&fpath)?.deserialize() {
        let r: FactualRow = row?;
        let key = (r.split as u8, r.patient);
        let p = splits.entry(key).or_insert_with(|| SimPatient {
            id: r.patient,
            response: PatientResponse {
                rho: r.rho,
                k: r.k,
                beta_c: r.beta_c,
                alpha_r: r.alpha_r,
                beta_r: r.beta_r,
                mixture_id: r.mixture,
            },
            volumes: Vec::new(),
            chemo: Vec::new(),
            radio: Vec::new(),
            concentration: Vec::new(),
            probability: Vec::new(),
            noise: Vec::new(),
        });
        if r.t != p.volumes.len() {
            return Err(Error::Parse(format!(
                "patient {} rows out of order at t={}",
                r.patient, r.t
            )));
        }
        let cat = [r.a_none, r.a_chemo, r.a_radio, r.a_both]
            .iter()
            .position(|&v| v == 1)
            .ok_or_else(|| {
                Error::Parse(format!("patient {} t={} has no treatment", r.patient, r.t))
            })?;
        let (chemo, radio) = treatment_parts(cat);
        p.volumes.push(r.volume);
        p.chemo.push(chemo);
        p.radio.push(radio);
        p.concentration.push(r.concentration);
        p.probability.push(r.probability);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for ((split, _), p) in splits {
        match split {
            s if s == Split::Train as u8 => train.push(p),
            s if s == Split::Val as u8 => val.push(p),
            _ => test.push(p),
        }
    }

    let mut test_cf = CounterfactualSet::default();
    for row in reader(&cpath)?.deserialize() {
        let r: CfRow = row?;
        let list = match r.kind.as_str() {
            "one-step" => &mut test_cf.one_step,
            "multi-step" => &mut test_cf.multi_step,
            other => {
                return Err(Error::Parse(format!(
                    "unknown counterfactual kind `{other}`"
                )))
            }
        };
        if r.step == 0 {
            list.push(Counterfactual {
                patient: r.patient,
                origin: r.origin,
                intervention: Vec::new(),
                outcomes: Vec::new(),
            });
        }
        let cf = list
            .last_mut()
            .filter(|c| {
                c.patient == r.patient && c.origin == r.origin && c.outcomes.len() == r.step
            })
            .ok_or_else(|| {
                Error::Parse(format!(
                    "counterfactual rows out of order for patient {}",
                    r.patient
                ))
            })?;
        cf.intervention.push(r.treatment);
        cf.outcomes.push(r.volume);
    }

    Ok(Dataset {
        config,
        train,
        val,
        test,
        test_cf,
    })
}
