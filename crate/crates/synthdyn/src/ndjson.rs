//! Datasets as newline-delimited JSON: one header object, then one object per
//! trajectory.
//!
//! ```text
//! {"version":1,"d_x":2,"d_u":1,"dt":0.05,"count":2,"provenance":{...}}
//! {"source_id":"rkhs-0-17","dt":0.05,"states":[[..],..],"actions":[[..],..]}
//! ```
//!
//! Floats are written in the shortest form that parses back to the same
//! value, so a write/read cycle is lossless and repeated writes of the same
//! dataset are byte-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use synthdyn_core::trajectory::DATASET_VERSION;
use synthdyn_core::{Dataset, DatasetHeader, Trajectory};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    source_id: String,
    dt: f64,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
}

impl Record {
    fn from_trajectory(tr: &Trajectory) -> Self {
        Self {
            source_id: tr.source_id.clone(),
            dt: tr.dt,
            states: tr.states().map(<[f64]>::to_vec).collect(),
            actions: tr.actions().map(<[f64]>::to_vec).collect(),
        }
    }

    fn into_trajectory(self, d_x: usize, d_u: usize) -> Result<Trajectory> {
        let bad = |what: &str| Error::Format(format!("trajectory {}: every {what} row must have the header's width", self.source_id));
        if self.states.iter().any(|s| s.len() != d_x) {
            return Err(bad("state"));
        }
        if self.actions.iter().any(|a| a.len() != d_u) {
            return Err(bad("action"));
        }
        if self.actions.len() != self.states.len() {
            return Err(Error::Format(format!(
                "trajectory {}: {} states but {} actions",
                self.source_id,
                self.states.len(),
                self.actions.len()
            )));
        }
        let states = self.states.concat();
        let actions = self.actions.concat();
        Ok(Trajectory::new(d_x, d_u, states, actions, self.dt, self.source_id)?)
    }
}

pub fn write<W: Write>(data: &Dataset, mut w: W) -> Result<()> {
    let io = |e| Error::Io { path: "<dataset stream>".into(), source: e };
    serde_json::to_writer(&mut w, &data.header()).map_err(Error::json("dataset header"))?;
    w.write_all(b"\n").map_err(io)?;
    for tr in data.trajectories() {
        serde_json::to_writer(&mut w, &Record::from_trajectory(tr)).map_err(Error::json("trajectory record"))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read<R: Read>(r: R) -> Result<Dataset> {
    let mut lines = BufReader::new(r).lines().enumerate();
    let io = |e| Error::Io { path: "<dataset stream>".into(), source: e };
    let (_, first) = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))?;
    let header: DatasetHeader = serde_json::from_str(&first.map_err(io)?).map_err(Error::json("dataset header (line 1)"))?;
    if header.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {} (expected {DATASET_VERSION})",
            header.version
        )));
    }
    let mut trs = Vec::with_capacity(header.count);
    for (i, line) in lines {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(Error::json(format!("trajectory record (line {})", i + 1)))?;
        trs.push(rec.into_trajectory(header.d_x, header.d_u)?);
    }
    if trs.len() != header.count {
        return Err(Error::Format(format!("header announces {} trajectories, file holds {}", header.count, trs.len())));
    }
    Ok(Dataset::new(header.d_x, header.d_u, header.dt, header.provenance, trs)?)
}

pub fn save(data: &Dataset, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(Error::io(path))?;
    write(data, BufWriter::new(f))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(Error::io(path))?;
    read(f)
}
