//! Ingestion of recorded trajectories from CSV.
//!
//! Expected columns: `trajectory`, then state columns `x0 .. x{d_x-1}`, then
//! action columns `u0 .. u{d_u-1}`. An optional `t` column is ignored. Rows of
//! one trajectory must be contiguous and in time order.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use synthdyn_core::{Dataset, Provenance, Trajectory};

use crate::error::{Error, Result};

struct Layout {
    id: usize,
    states: Vec<usize>,
    actions: Vec<usize>,
}

fn layout(headers: &csv::StringRecord) -> Result<Layout> {
    let mut id = None;
    let (mut states, mut actions) = (Vec::new(), Vec::new());
    for (i, h) in headers.iter().enumerate() {
        let h = h.trim();
        let indexed = |prefix: &str| h.strip_prefix(prefix).and_then(|n| n.parse::<usize>().ok());
        if h == "trajectory" {
            id = Some(i);
        } else if h == "t" {
        } else if let Some(k) = indexed("x") {
            states.push((k, i));
        } else if let Some(k) = indexed("u") {
            actions.push((k, i));
        } else {
            return Err(Error::Format(format!("unexpected CSV column {h:?}")));
        }
    }
    let id = id.ok_or_else(|| Error::Format("CSV needs a `trajectory` column".into()))?;
    let ordered = |mut v: Vec<(usize, usize)>, name: &str| -> Result<Vec<usize>> {
        v.sort_unstable();
        if v.iter().enumerate().any(|(k, &(n, _))| k != n) {
            return Err(Error::Format(format!("{name} columns must be numbered 0, 1, 2, ...")));
        }
        Ok(v.into_iter().map(|(_, c)| c).collect())
    };
    let states = ordered(states, "state")?;
    if states.is_empty() {
        return Err(Error::Format("CSV needs at least one state column x0".into()));
    }
    Ok(Layout { id, states, actions: ordered(actions, "action")? })
}

pub fn read<R: Read>(r: R, dt: f64, source: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let ctx = |e| Error::Csv { context: format!("reading {source}"), source: e };
    let cols = layout(rdr.headers().map_err(ctx)?)?;
    let (d_x, d_u) = (cols.states.len(), cols.actions.len());
    let mut trs: Vec<Trajectory> = Vec::new();
    let mut current: Option<(String, Vec<f64>, Vec<f64>)> = None;
    let mut seen = std::collections::BTreeSet::new();
    let flush = |cur: Option<(String, Vec<f64>, Vec<f64>)>, trs: &mut Vec<Trajectory>| -> Result<()> {
        if let Some((id, s, a)) = cur {
            trs.push(Trajectory::new(d_x, d_u, s, a, dt, id)?);
        }
        Ok(())
    };
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(ctx)?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Format(format!("{source} row {}: column {c} is not a number", line + 2)))
        };
        let id = rec.get(cols.id).unwrap_or_default().to_string();
        if current.as_ref().is_none_or(|(cur, _, _)| *cur != id) {
            if !seen.insert(id.clone()) {
                return Err(Error::Format(format!("{source}: rows of trajectory {id:?} are not contiguous")));
            }
            flush(current.take(), &mut trs)?;
            current = Some((id, Vec::new(), Vec::new()));
        }
        let (_, s, a) = current.as_mut().expect("set above");
        for &c in &cols.states {
            s.push(num(c)?);
        }
        for &c in &cols.actions {
            a.push(num(c)?);
        }
    }
    flush(current, &mut trs)?;
    if trs.is_empty() {
        return Err(Error::Format(format!("{source} holds no rows")));
    }
    Ok(Dataset::new(d_x, d_u, dt, Provenance::Recorded { source: source.into() }, trs)?)
}

pub fn load(path: &Path, dt: f64) -> Result<Dataset> {
    let f = File::open(path).map_err(Error::io(path))?;
    read(f, dt, &path.display().to_string())
}

/// Writes trajectories in the layout [`read`] accepts, with a `t` column.
pub fn write<W: Write>(trs: &[Trajectory], w: W) -> Result<()> {
    let Some(first) = trs.first() else { return Err(Error::Format("nothing to write".into())) };
    let ctx = |e| Error::Csv { context: "writing trajectories".into(), source: e };
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["trajectory".to_string(), "t".to_string()];
    header.extend((0..first.d_x()).map(|i| format!("x{i}")));
    header.extend((0..first.d_u()).map(|i| format!("u{i}")));
    wtr.write_record(&header).map_err(ctx)?;
    for tr in trs {
        if (tr.d_x(), tr.d_u()) != (first.d_x(), first.d_u()) {
            return Err(Error::Format("trajectories in one CSV need equal dimensions".into()));
        }
        for k in 0..tr.len() {
            let mut row = vec![tr.source_id.clone(), (k as f64 * tr.dt).to_string()];
            row.extend(tr.state(k).iter().chain(tr.action(k)).map(f64::to_string));
            wtr.write_record(&row).map_err(ctx)?;
        }
    }
    wtr.flush().map_err(|e| Error::Format(format!("writing trajectories: {e}")))
}
