//! On-disk dataset directories.
//!
//! A dataset is a directory holding a `manifest` of `key=value` lines and a
//! `signals.bin` blob of little-endian `f32` values laid out
//! `[sample][time][lead]`.
//!
//! ```text
//! format_version=1
//! n=2400
//! t=200
//! l=12
//! c=24
//! leads=I,II,III,aVR,aVL,aVF,V1,V2,V3,V4,V5,V6
//! labels=0,0,0,...
//! ventricles=LV,LV,...,RV
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::signal::{EcgSignal, LabeledDataset, Ventricle};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";
pub const SIGNALS_FILE: &str = "signals.bin";

pub fn write_dataset(dataset: &LabeledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let join = |v: Vec<String>| v.join(",");
    let mut manifest = String::new();
    manifest.push_str(&format!("format_version={FORMAT_VERSION}\n"));
    manifest.push_str(&format!("n={}\n", dataset.len()));
    manifest.push_str(&format!("t={}\n", dataset.time_steps()));
    manifest.push_str(&format!("l={}\n", dataset.leads()));
    manifest.push_str(&format!("c={}\n", dataset.class_count()));
    manifest.push_str(&format!("leads={}\n", join(dataset.lead_names())));
    manifest.push_str(&format!(
        "labels={}\n",
        join(dataset.labels().iter().map(|y| y.to_string()).collect())
    ));
    manifest.push_str(&format!(
        "ventricles={}\n",
        join(dataset.ventricles().iter().map(|v| v.short().to_string()).collect())
    ));
    fs::write(dir.join(MANIFEST_FILE), manifest)?;

    let mut blob = Vec::with_capacity(dataset.len() * dataset.time_steps() * dataset.leads() * 4);
    for s in dataset.signals() {
        for v in s.values() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(dir.join(SIGNALS_FILE))?;
    f.write_all(&blob)?;
    Ok(())
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(path, format!("line {} is not key=value", no + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse_list<T: std::str::FromStr>(path: &Path, key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| {
            x.trim()
                .parse::<T>()
                .map_err(|_| corrupt(path, format!("bad entry {x:?} in {key}")))
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<LabeledDataset> {
    let manifest_path: PathBuf = dir.join(MANIFEST_FILE);
    let m = parse_manifest(&manifest_path)?;
    let get = |k: &str| {
        m.get(k)
            .ok_or_else(|| corrupt(&manifest_path, format!("missing key {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse::<usize>()
            .map_err(|_| corrupt(&manifest_path, format!("key {k} is not an integer")))
    };

    let version: u32 = get("format_version")?
        .parse()
        .map_err(|_| corrupt(&manifest_path, "format_version is not an integer"))?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (n, t, l, c) = (num("n")?, num("t")?, num("l")?, num("c")?);
    let leads: Vec<String> = get("leads")?.split(',').map(|s| s.trim().to_string()).collect();
    if leads.len() != l {
        return Err(corrupt(&manifest_path, format!("{} lead names for l={l}", leads.len())));
    }
    let labels: Vec<usize> = parse_list(&manifest_path, "labels", get("labels")?)?;
    if labels.len() != n {
        return Err(corrupt(&manifest_path, format!("{} labels for n={n}", labels.len())));
    }
    let ventricles = match m.get("ventricles") {
        Some(v) => v
            .split(',')
            .map(|s| {
                Ventricle::parse(s).ok_or_else(|| corrupt(&manifest_path, format!("bad ventricle {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?,
        None => crate::signal::default_ventricles(c),
    };

    let blob_path = dir.join(SIGNALS_FILE);
    let blob = fs::read(&blob_path)?;
    let per_sample = t * l;
    if blob.len() != n * per_sample * 4 {
        return Err(corrupt(
            &blob_path,
            format!(
                "blob has {} bytes, manifest declares {n}x{t}x{l} f32 = {} bytes",
                blob.len(),
                n * per_sample * 4
            ),
        ));
    }
    let mut signals = Vec::with_capacity(n);
    for chunk in blob.chunks_exact(per_sample * 4) {
        let values: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        signals.push(EcgSignal::with_leads(t, l, values, leads.clone())?);
    }
    LabeledDataset::with_ventricles(t, l, c, signals, labels, ventricles)
}
